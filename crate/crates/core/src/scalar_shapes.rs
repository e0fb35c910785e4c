//! Smooth scalar profiles: the slow logarithmic ramp, its decreasing mirror,
//! plateau bumps and radial expansion profiles.

use gauss_quad::legendre::GaussLegendre;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("ramp needs Q/P > {required_ratio} (got {actual_ratio}) and positive parameters")]
    RampRatio { required_ratio: f64, actual_ratio: f64 },
    #[error("plateau bump needs 0 <= P < Q (got P = {p}, Q = {q})")]
    PlateauOrder { p: f64, q: f64 },
    #[error("expansion profile needs K >= 1, s2 > 0 and K*s2 < r3 (got K = {k}, s2 = {s2}, r3 = {r3})")]
    InfeasibleProfile { k: f64, s2: f64, r3: f64 },
    #[error("constructed ramp failed its self-check: {0}")]
    SelfCheck(String),
}

/// The C∞ step `S(t) = f(t)/(f(t) + f(1−t))` with `f(t) = exp(−1/t)`,
/// equal to 0 for `t <= 0` and 1 for `t >= 1`.
pub fn smooth_step(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t >= 1.0 {
        1.0
    } else {
        let e = (1.0 / t - 1.0 / (1.0 - t)).exp();
        1.0 / (1.0 + e)
    }
}

/// Derivative of [`smooth_step`].
pub fn smooth_step_deriv(t: f64) -> f64 {
    if t <= 0.0 || t >= 1.0 {
        0.0
    } else {
        let s = smooth_step(t);
        s * (1.0 - s) * (1.0 / (t * t) + 1.0 / ((1.0 - t) * (1.0 - t)))
    }
}

/// Supremum of `S'`, attained at `t = 1/2`.
pub fn smooth_step_deriv_max() -> f64 {
    static MAX: OnceLock<f64> = OnceLock::new();
    *MAX.get_or_init(|| {
        let m = 20_000;
        (0..=m).map(|k| smooth_step_deriv(k as f64 / m as f64)).fold(0.0, f64::max) * (1.0 + 1e-9)
    })
}

const STEP_TABLE_CELLS: usize = 4096;

fn step_integral_table() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let gl = GaussLegendre::new(24.try_into().expect("nonzero"));
        let h = 1.0 / STEP_TABLE_CELLS as f64;
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(STEP_TABLE_CELLS + 1);
        out.push(0.0);
        for k in 0..STEP_TABLE_CELLS {
            acc += gl.integrate(k as f64 * h, (k + 1) as f64 * h, smooth_step);
            out.push(acc);
        }
        out
    })
}

/// `∫_0^u S(τ) dτ` for any real `u`, by cubic Hermite interpolation of a
/// quadrature table whose node derivatives are the exact step values.
pub fn smooth_step_integral(u: f64) -> f64 {
    if u <= 0.0 {
        return 0.0;
    }
    if u >= 1.0 {
        return 0.5 + (u - 1.0);
    }
    let table = step_integral_table();
    let h = 1.0 / STEP_TABLE_CELLS as f64;
    let k = ((u / h) as usize).min(STEP_TABLE_CELLS - 1);
    let (x0, x1) = (k as f64 * h, (k + 1) as f64 * h);
    let s = (u - x0) / h;
    let (y0, y1) = (table[k], table[k + 1]);
    let (m0, m1) = (smooth_step(x0) * h, smooth_step(x1) * h);
    let s2 = s * s;
    let s3 = s2 * s;
    (2.0 * s3 - 3.0 * s2 + 1.0) * y0 + (s3 - 2.0 * s2 + s) * m0 + (-2.0 * s3 + 3.0 * s2) * y1 + (s3 - s2) * m1
}

/// Orientation of a ramp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RampDirection {
    /// `φ`: 0 below `P`, 1 above `Q`.
    Increasing,
    /// `1 − φ`: 1 below `P`, 0 above `Q`.
    Decreasing,
}

/// Non-decreasing C∞ ramp from 0 at `P` to 1 at `Q` whose multiplicative
/// increments satisfy `φ((1+σ)x) − φ(x) <= ζσ`, built by mollifying the
/// clamped logarithm `clamp(ζ′·log(x/P′), 0, 1)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlowRamp {
    pub p: f64,
    pub q: f64,
    pub zeta: f64,
    pub direction: RampDirection,
    /// Inner slope constant `ζ′ < ζ`.
    pub zeta_inner: f64,
    /// Lower kink `P′` of the clamped logarithm.
    pub p_inner: f64,
    /// Upper kink `Q′ = e^{1/ζ′}P′`.
    pub q_inner: f64,
    /// Mollifier half-width.
    pub half_width: f64,
    #[serde(skip)]
    mollifier: Mollifier,
}

/// Normalised even bump `δ(t) ∝ exp(−1/(1 − (t/a)²))` on `(−a, a)`, stored
/// in the unit variable `s = t/a`.
#[derive(Debug, Clone)]
struct Mollifier {
    norm: f64,
    /// Even moments `∫ δ(t) (t/a)^{2j} dt`, `j = 1, 2, ...`.
    even_moments: Vec<f64>,
    rule: std::sync::Arc<GaussLegendre>,
}

impl Default for Mollifier {
    fn default() -> Self {
        Self::new()
    }
}

fn unit_mollifier(s: f64) -> f64 {
    if s <= -1.0 || s >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - s * s)).exp()
    }
}

impl Mollifier {
    fn new() -> Self {
        static RULE: OnceLock<std::sync::Arc<GaussLegendre>> = OnceLock::new();
        let rule = RULE.get_or_init(|| std::sync::Arc::new(GaussLegendre::new(64.try_into().expect("nonzero")))).clone();
        let fine = GaussLegendre::new(400.try_into().expect("nonzero"));
        let norm = fine.integrate(-1.0, 1.0, unit_mollifier);
        let even_moments = (1..=12)
            .map(|j| fine.integrate(-1.0, 1.0, |s| unit_mollifier(s) * s.powi(2 * j)) / norm)
            .collect();
        Self { norm, even_moments, rule }
    }

    /// `∫_{s0}^{s1} δ(s) g(s) ds` in the unit variable.
    fn integrate<G: Fn(f64) -> f64>(&self, s0: f64, s1: f64, g: G) -> f64 {
        if s1 <= s0 {
            return 0.0;
        }
        self.rule.integrate(s0, s1, |s| unit_mollifier(s) * g(s)) / self.norm
    }
}

impl SlowRamp {
    /// Increasing ramp: `φ = 0` for `x <= P`, `φ = 1` for `x >= Q`.
    pub fn new(p: f64, q: f64, zeta: f64) -> Result<Self, ShapeError> {
        Self::build(p, q, zeta, RampDirection::Increasing)
    }

    /// Decreasing mirror `1 − φ`.
    pub fn decreasing(p: f64, q: f64, zeta: f64) -> Result<Self, ShapeError> {
        Self::build(p, q, zeta, RampDirection::Decreasing)
    }

    /// Smallest admissible `Q/P` for a given `ζ`.
    pub fn min_ratio(zeta: f64) -> f64 {
        (1.0 / zeta).exp()
    }

    fn build(p: f64, q: f64, zeta: f64, direction: RampDirection) -> Result<Self, ShapeError> {
        let required_ratio = Self::min_ratio(zeta);
        let ok = p > 0.0 && q.is_finite() && zeta > 0.0 && zeta.is_finite() && q / p > required_ratio;
        if !ok {
            return Err(ShapeError::RampRatio { required_ratio, actual_ratio: q / p });
        }
        // The inner slope must lie strictly between 1/log(Q/P) and ζ.
        let zeta_floor = 1.0 / (q / p).ln();
        let zeta_inner = if zeta * (15.0 / 16.0) > zeta_floor {
            zeta * (15.0 / 16.0)
        } else {
            0.5 * (zeta_floor + zeta)
        };
        let span = (1.0 / zeta_inner).exp();
        let p_max = q / span;
        let p_inner = (p * p_max).sqrt();
        let q_inner = p_inner * span;
        let a_max = (q - q_inner).min(p_inner - p).min((zeta - zeta_inner) * p / (1.0 + zeta));
        let half_width = 0.5 * a_max;
        if !(half_width > 0.0) {
            return Err(ShapeError::RampRatio { required_ratio, actual_ratio: q / p });
        }
        Ok(Self {
            p,
            q,
            zeta,
            direction,
            zeta_inner,
            p_inner,
            q_inner,
            half_width,
            mollifier: Mollifier::new(),
        })
    }

    /// Unmollified clamped logarithm `ψ`.
    pub fn raw(&self, x: f64) -> f64 {
        if x <= self.p_inner {
            0.0
        } else if x >= self.q_inner {
            1.0
        } else {
            self.zeta_inner * (x / self.p_inner).ln()
        }
    }

    /// Increasing ramp value `φ(x)` and derivative `φ′(x)`.
    fn increasing_value_deriv(&self, x: f64) -> (f64, f64) {
        let a = self.half_width;
        if x <= self.p_inner - a {
            return (0.0, 0.0);
        }
        if x >= self.q_inner + a {
            return (1.0, 0.0);
        }
        let zi = self.zeta_inner;
        if x >= self.p_inner + a && x <= self.q_inner - a {
            // Away from the kinks the convolution of the logarithm reduces to
            // an even-moment series in (a/x)^2.
            let ratio2 = (a / x) * (a / x);
            let mut value = (x / self.p_inner).ln();
            let mut deriv = 1.0 / x;
            let mut pow = 1.0;
            for (j, m) in self.mollifier.even_moments.iter().enumerate() {
                pow *= ratio2;
                let k = 2.0 * (j as f64 + 1.0);
                let term = m * pow;
                value -= term / k;
                deriv += term / x;
                if term < 1e-18 {
                    break;
                }
            }
            return (zi * value, zi * deriv);
        }
        // Near a kink, integrate piecewise over the mollifier support with the
        // kinks as breakpoints; s is the unit mollifier variable, y = x − a·s.
        let mut cuts = vec![-1.0, 1.0];
        for kink in [self.p_inner, self.q_inner] {
            let s = (x - kink) / a;
            if s > -1.0 && s < 1.0 {
                cuts.push(s);
            }
        }
        cuts.sort_by(f64::total_cmp);
        let mut value = 0.0;
        let mut deriv = 0.0;
        for w in cuts.windows(2) {
            let (s0, s1) = (w[0], w[1]);
            let mid = x - a * 0.5 * (s0 + s1);
            if mid <= self.p_inner {
                continue;
            }
            if mid >= self.q_inner {
                value += self.mollifier.integrate(s0, s1, |_| 1.0);
                continue;
            }
            value += self.mollifier.integrate(s0, s1, |s| zi * ((x - a * s) / self.p_inner).ln());
            deriv += self.mollifier.integrate(s0, s1, |s| zi / (x - a * s));
        }
        (value.clamp(0.0, 1.0), deriv.max(0.0))
    }

    /// Ramp value at `x > 0`.
    pub fn value(&self, x: f64) -> f64 {
        let (v, _) = self.increasing_value_deriv(x);
        match self.direction {
            RampDirection::Increasing => v,
            RampDirection::Decreasing => 1.0 - v,
        }
    }

    /// Ramp derivative at `x > 0`.
    pub fn deriv(&self, x: f64) -> f64 {
        let (_, d) = self.increasing_value_deriv(x);
        match self.direction {
            RampDirection::Increasing => d,
            RampDirection::Decreasing => -d,
        }
    }

    /// Value and derivative together.
    pub fn value_deriv(&self, x: f64) -> (f64, f64) {
        let (v, d) = self.increasing_value_deriv(x);
        match self.direction {
            RampDirection::Increasing => (v, d),
            RampDirection::Decreasing => (1.0 - v, -d),
        }
    }

    /// Upper bound on `sup |x φ′(x)|`, which equals `ζ′` up to mollifier
    /// distortion of order `a/P′`.
    pub fn log_slope_bound(&self) -> f64 {
        self.zeta_inner * (1.0 + self.half_width / (self.p_inner - self.half_width))
    }

    /// Interval outside which the ramp is exactly constant.
    pub fn transition_interval(&self) -> (f64, f64) {
        (self.p_inner - self.half_width, self.q_inner + self.half_width)
    }

    /// Rebuild the non-serialised quadrature state after deserialisation.
    pub fn rehydrate(mut self) -> Self {
        self.mollifier = Mollifier::new();
        self
    }
}

impl PartialEq for SlowRamp {
    fn eq(&self, other: &Self) -> bool {
        self.p == other.p && self.q == other.q && self.zeta == other.zeta && self.direction == other.direction
    }
}

/// Plateau bump or radial expansion profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Profile {
    /// Non-increasing: 1 on `[0, P]`, 0 on `[Q, ∞)`.
    Plateau { p: f64, q: f64 },
    /// Radial scale factor `ν`: `K` below `s2`, 1 above `r3`, with
    /// `r ↦ r ν(r)` strictly increasing.
    Expansion(ExpansionProfile),
}

/// Expansion profile described through `m(r) = r ν(r)`, whose derivative is
/// a partition-of-unity blend of `K`, a middle level `c > 0` and 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionProfile {
    pub k: f64,
    pub s2: f64,
    pub r3: f64,
    /// Fraction of `[s2, r3]` used by each of the two transitions.
    pub alpha: f64,
    /// Middle level of `m′`.
    pub middle: f64,
}

impl ExpansionProfile {
    pub fn new(k: f64, s2: f64, r3: f64) -> Result<Self, ShapeError> {
        if !(k >= 1.0 && s2 > 0.0 && k * s2 < r3 && r3.is_finite()) {
            return Err(ShapeError::InfeasibleProfile { k, s2, r3 });
        }
        let len = r3 - s2;
        let tau = (r3 - k * s2) / len;
        let alpha = (tau / (k + 1.0)).min(0.25);
        let middle = (tau - (k + 1.0) * alpha / 2.0) / (1.0 - alpha);
        Ok(Self { k, s2, r3, alpha, middle })
    }

    fn unit(&self, r: f64) -> f64 {
        (r - self.s2) / (self.r3 - self.s2)
    }

    /// `m(r) = r ν(r)`.
    pub fn radius_map(&self, r: f64) -> f64 {
        if self.k == 1.0 || r >= self.r3 {
            return if r >= self.r3 { r } else { self.k * r };
        }
        if r <= self.s2 {
            return self.k * r;
        }
        let t = self.unit(r);
        let a = self.alpha;
        let len = self.r3 - self.s2;
        let first = a * smooth_step_integral(t / a);
        let second = a * smooth_step_integral((t - 1.0 + a) / a);
        self.k * self.s2 + len * (self.k * t - (self.k - self.middle) * first - (self.middle - 1.0) * second)
    }

    /// `m′(r)`, always positive.
    pub fn radius_map_deriv(&self, r: f64) -> f64 {
        if r <= self.s2 {
            return self.k;
        }
        if r >= self.r3 {
            return 1.0;
        }
        let t = self.unit(r);
        let a = self.alpha;
        let sa = smooth_step(t / a);
        let sb = smooth_step((t - 1.0 + a) / a);
        self.k * (1.0 - sa) + self.middle * (sa - sb) + sb
    }

    /// `ν(r) = m(r)/r` and `ν′(r)`.
    pub fn nu(&self, r: f64) -> (f64, f64) {
        if r <= self.s2 {
            return (self.k, 0.0);
        }
        if r >= self.r3 {
            return (1.0, 0.0);
        }
        let m = self.radius_map(r);
        let dm = self.radius_map_deriv(r);
        (m / r, (dm * r - m) / (r * r))
    }

    /// Solve `m(r) = target` for `r >= 0`.
    pub fn inverse_radius(&self, target: f64) -> f64 {
        if target <= self.k * self.s2 {
            return target / self.k;
        }
        if target >= self.r3 {
            return target;
        }
        let (mut lo, mut hi) = (self.s2, self.r3);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.radius_map(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-16 * hi {
                break;
            }
        }
        // Polish with Newton steps on the monotone radius map.
        let mut r = 0.5 * (lo + hi);
        for _ in 0..3 {
            let step = (self.radius_map(r) - target) / self.radius_map_deriv(r);
            let next = r - step;
            if next > lo && next < hi {
                r = next;
            }
        }
        r
    }

    /// Bounds `(inf m′, sup m′)`.
    pub fn slope_bounds(&self) -> (f64, f64) {
        let lo = self.k.min(self.middle).min(1.0);
        let hi = self.k.max(self.middle).max(1.0);
        (lo, hi)
    }
}

impl Profile {
    pub fn plateau(p: f64, q: f64) -> Result<Self, ShapeError> {
        if !(p >= 0.0 && p < q && q.is_finite()) {
            return Err(ShapeError::PlateauOrder { p, q });
        }
        Ok(Profile::Plateau { p, q })
    }

    pub fn expansion(k: f64, s2: f64, r3: f64) -> Result<Self, ShapeError> {
        Ok(Profile::Expansion(ExpansionProfile::new(k, s2, r3)?))
    }

    pub fn value(&self, r: f64) -> f64 {
        self.value_deriv(r).0
    }

    pub fn deriv(&self, r: f64) -> f64 {
        self.value_deriv(r).1
    }

    pub fn value_deriv(&self, r: f64) -> (f64, f64) {
        match self {
            Profile::Plateau { p, q } => {
                let w = q - p;
                let t = (q - r) / w;
                (smooth_step(t), -smooth_step_deriv(t) / w)
            }
            Profile::Expansion(e) => e.nu(r),
        }
    }

    /// `sup |ψ′|` for a plateau bump, or `sup |ν′|` estimated on a grid for
    /// an expansion profile.
    pub fn deriv_sup(&self) -> f64 {
        match self {
            Profile::Plateau { p, q } => smooth_step_deriv_max() / (q - p),
            Profile::Expansion(e) => {
                let m = 20_000;
                (0..=m)
                    .map(|i| e.nu(e.s2 + (e.r3 - e.s2) * i as f64 / m as f64).1.abs())
                    .fold(0.0, f64::max)
            }
        }
    }
}

/// Convenience constructor for the plateau bump.
pub fn make_plateau_bump(p: f64, q: f64) -> Result<Profile, ShapeError> {
    Profile::plateau(p, q)
}

/// Convenience constructor for the expansion profile.
pub fn make_expansion_profile(k: f64, s2: f64, r3: f64) -> Result<Profile, ShapeError> {
    Profile::expansion(k, s2, r3)
}

/// Convenience constructor for the increasing slow ramp.
pub fn make_slow_ramp(p: f64, q: f64, zeta: f64) -> Result<SlowRamp, ShapeError> {
    SlowRamp::new(p, q, zeta)
}

/// Convenience constructor for the decreasing slow ramp.
pub fn make_decreasing_ramp(p: f64, q: f64, zeta: f64) -> Result<SlowRamp, ShapeError> {
    SlowRamp::decreasing(p, q, zeta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn smooth_step_basics() {
        assert_eq!(smooth_step(0.0), 0.0);
        assert_eq!(smooth_step(1.0), 1.0);
        assert!((smooth_step(0.5) - 0.5).abs() < 1e-15);
        assert!((smooth_step_deriv_max() - 2.0).abs() < 1e-6);
        assert!((smooth_step_integral(1.0) - 0.5).abs() < 1e-14);
        let gl = GaussLegendre::new(200.try_into().unwrap());
        for &u in &[0.1, 0.37, 0.5, 0.81, 0.999] {
            let exact = gl.integrate(0.0, u, smooth_step);
            assert!((smooth_step_integral(u) - exact).abs() < 1e-13, "{u}");
        }
    }

    #[test]
    fn ramp_endpoints_and_middle() {
        let q = 10f64.exp();
        let r = SlowRamp::new(1.0, q, 0.2).unwrap();
        assert_eq!(r.value(1.0), 0.0);
        assert_eq!(r.value(q), 1.0);
        let mid = r.value(q.sqrt());
        assert!(mid > 0.0 && mid < 1.0);
        assert!(SlowRamp::new(1.0, 4.0f64.exp(), 0.2).is_err());
    }

    #[test]
    fn ramp_monotone_and_increment_property() {
        let q = 12f64.exp();
        let r = SlowRamp::new(2.0, 2.0 * q, 0.1).unwrap();
        let (lo, hi) = r.transition_interval();
        let mut prev = 0.0;
        for k in 0..=20_000 {
            let x = lo * (hi / lo).powf(k as f64 / 20_000.0) * 0.99;
            let v = r.value(x);
            assert!(v >= prev - 1e-15);
            prev = v;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20_000 {
            let x = (rng.random_range(0.0..16.0f64)).exp() * 0.5;
            let sigma = rng.random_range(0.0..3.0f64).powi(3);
            assert!(r.value((1.0 + sigma) * x) - r.value(x) <= 0.1 * sigma + 1e-6);
        }
    }

    #[test]
    fn ramp_derivative_matches_finite_differences() {
        let r = SlowRamp::new(1.0, 30f64.exp(), 0.05).unwrap();
        let (lo, hi) = r.transition_interval();
        for k in 1..400 {
            let x = lo * (hi / lo).powf(k as f64 / 400.0);
            let h = 1e-6 * x;
            let fd = (r.value(x + h) - r.value(x - h)) / (2.0 * h);
            let d = r.deriv(x);
            assert!((fd - d).abs() <= 1e-5 * d.abs().max(1e-3 / x), "x={x} fd={fd} d={d}");
        }
    }

    #[test]
    fn ramp_agrees_with_clamped_log_outside_transition() {
        let r = SlowRamp::new(1.0, 20f64.exp(), 0.1).unwrap();
        let (lo, hi) = r.transition_interval();
        for &x in &[0.5, lo * 0.999, hi * 1.001, hi * 10.0] {
            assert!((r.value(x) - r.raw(x)).abs() <= 1e-12);
        }
    }

    #[test]
    fn decreasing_ramp() {
        let q = 10f64.exp();
        let r = SlowRamp::decreasing(1.0, q, 0.2).unwrap();
        assert_eq!(r.value(1.0), 1.0);
        assert_eq!(r.value(q), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5000 {
            let x = rng.random_range(0.0..11.0f64).exp();
            let sigma = rng.random_range(0.0..2.0);
            assert!(r.value(x) - r.value((1.0 + sigma) * x) <= 0.2 * sigma + 1e-6);
        }
    }

    #[test]
    fn plateau_bump() {
        let b = make_plateau_bump(0.5, 2.0).unwrap();
        assert_eq!(b.value(0.0), 1.0);
        assert_eq!(b.value(0.5), 1.0);
        assert_eq!(b.value(2.0), 0.0);
        assert!(b.deriv_sup() >= 1.0 / 1.5);
        for &x in &[0.5, 2.0] {
            let h = 1e-5;
            let fd = (b.value(x + h) - b.value(x - h)) / (2.0 * h);
            assert!(fd.abs() < 1e-8);
        }
        assert!(make_plateau_bump(2.0, 1.0).is_err());
    }

    #[test]
    fn expansion_profile() {
        let one = ExpansionProfile::new(1.0, 1.0, 3.0).unwrap();
        for &r in &[0.1, 1.5, 2.9, 5.0] {
            assert!((one.nu(r).0 - 1.0).abs() < 1e-12);
        }
        let e = ExpansionProfile::new(2.0, 1.0, 3.0).unwrap();
        assert_eq!(e.nu(1.0).0 * 1.0, 2.0);
        assert!((e.nu(3.0).0 * 3.0 - 3.0).abs() < 1e-12);
        assert!((e.radius_map(3.0 - 1e-12) - 3.0).abs() < 1e-9);
        let mut prev = 0.0;
        for k in 0..=10_000 {
            let r = 4.0 * k as f64 / 10_000.0;
            let m = e.radius_map(r);
            assert!(k == 0 || m > prev);
            prev = m;
        }
        for &target in &[0.3, 2.0, 2.5, 2.99, 4.0] {
            assert!((e.radius_map(e.inverse_radius(target)) - target).abs() < 1e-12);
        }
        assert!(ExpansionProfile::new(2.0, 2.0, 3.0).is_err());
    }

    #[test]
    fn expansion_derivative_matches_finite_differences() {
        let e = ExpansionProfile::new(5.0, 1.0, 8.0).unwrap();
        for k in 1..200 {
            let r = 1.0 + 7.0 * k as f64 / 200.0;
            let h = 1e-6;
            let fd = (e.radius_map(r + h) - e.radius_map(r - h)) / (2.0 * h);
            assert!((fd - e.radius_map_deriv(r)).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }
}
