//! Map-building algorithms: matrix morphing, linearisation near a point,
//! localisation to a translation, bumps, rotations, expansions, averaging,
//! and extension of a finite partial bijection to a whole map.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom_core::{
    angle, in_n_theta, op_norm, plane_basis, tw_finite, FiniteRelation, GeomError, Matrix, TwistBudget, Vector,
};
use crate::map_algebra::verify::{PointSampler, VerifyBudget};
use crate::map_algebra::{MapError, RadialWeight, RotateExpand, Stage, TwistMap};
use crate::optim::maximize;
use crate::sampling::{unit_vector, uniform_in_ball};
use crate::scalar_shapes::{smooth_step_deriv_max, ExpansionProfile, ShapeError, SlowRamp};

pub use crate::map_algebra::path::{MatrixPath, PathKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstructionError {
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error("radius ratio {actual:.4e} is below the required {required:.4e}")]
    RatioTooSmall { required: f64, actual: f64 },
    #[error("displacement of norm {norm:.4e} exceeds the admissible {max_norm:.4e}")]
    BumpTooLarge { norm: f64, max_norm: f64 },
    #[error("path leaves the admissible matrices at t = {t:.4} (twist {twist:.6}, det {det:.4e})")]
    PathMembership { t: f64, twist: f64, det: f64 },
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
}

/// Target twist, working twist and the ε budget for chained steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadroomSchedule {
    pub theta: f64,
    pub theta_hat: f64,
    pub epsilon: f64,
}

impl HeadroomSchedule {
    /// `θ̂ = (π/2 + θ)/2` above a right angle, `15θ/16` otherwise.
    pub fn for_theta(theta: f64) -> Self {
        let theta_hat = if theta > FRAC_PI_2 { 0.5 * (FRAC_PI_2 + theta) } else { theta * 15.0 / 16.0 };
        Self { theta, theta_hat, epsilon: 0.1 }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn gap(&self) -> f64 {
        self.theta - self.theta_hat
    }

    /// Budget for the `i`-th of a chain of steps; the series sums below ε.
    pub fn epsilon_share(&self, i: usize) -> f64 {
        self.epsilon / 2f64.powi(i as i32 + 1)
    }
}

fn certified(f: &TwistMap) -> Result<f64, ConstructionError> {
    f.certified_twist.ok_or_else(|| ConstructionError::Precondition("map carries no twist certificate".into()))
}

/// Sampled `sup ‖J_f(x)⁻¹‖`, i.e. the Lipschitz constant of `f⁻¹`, with a
/// 10% safety factor. Never below 1.
pub fn inverse_lipschitz(f: &TwistMap, seed: u64) -> f64 {
    let sampler = PointSampler::for_domain(&[f]);
    if sampler.is_empty() {
        return 1.0;
    }
    let pts = sampler.batch(seed, 40, 4000);
    let sup = pts
        .iter()
        .map(|x| f.jacobian(x).try_inverse().map_or(f64::INFINITY, |j| op_norm(&j)))
        .fold(1.0, f64::max);
    sup * 1.1
}

/// Sampled `sup ‖J_f(x)‖`, with a 10% safety factor. Never below 1.
pub fn forward_lipschitz(f: &TwistMap, seed: u64) -> f64 {
    let sampler = PointSampler::for_domain(&[f]);
    if sampler.is_empty() {
        return 1.0;
    }
    let pts = sampler.batch(seed, 41, 4000);
    pts.iter().map(|x| op_norm(&f.jacobian(x))).fold(1.0, f64::max) * 1.1
}

/// `Γ(t) = J_f(t a + (1 − t) d)` for a far point `d` on the first axis,
/// sampled at 65 knots, with every knot checked to lie in `N_θ` for the
/// certified twist of `f`.
pub fn jacobian_path(f: &TwistMap, a: &Vector) -> Result<MatrixPath, ConstructionError> {
    let n = f.dim;
    if f.support.radius == 0.0 || (a - &f.support.center).norm() >= f.support.radius {
        return Ok(MatrixPath::constant(Matrix::identity(n, n)));
    }
    let mut d = Vector::zeros(n);
    d[0] = (2.0 * f.support_radius).max(1.0);
    let theta = f.certified_twist.unwrap_or(PI);
    let budget = TwistBudget::for_dimension(n);
    let mut knots = Vec::with_capacity(65);
    for i in 0..=64 {
        let t = i as f64 / 64.0;
        let j = f.jacobian(&(a * t + &d * (1.0 - t)));
        let report = in_n_theta(&j, theta + 1e-9, budget);
        if !report.member {
            return Err(ConstructionError::PathMembership { t, twist: report.twist, det: report.det });
        }
        knots.push(j);
    }
    Ok(MatrixPath::sampled(knots))
}

/// The segment `Γ(t) = (1 − t)I + tA`. Each `Γ(t)v` lies between `v` and
/// `Av`, so its twist never exceeds that of `A`.
pub fn straight_path(a: &Matrix) -> MatrixPath {
    MatrixPath::sampled(vec![Matrix::identity(a.nrows(), a.ncols()), a.clone()])
}

/// `h(v) = Γ(φ(‖v‖)) v` about a centre, with its certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialMorph {
    pub center: Vector,
    pub path: MatrixPath,
    pub ramp: SlowRamp,
    /// Proven bound `θ + ε/2` on the twist of `h`.
    pub certified_twist: f64,
    /// `M = sup ‖Γ(t)⁻¹‖`, giving the floor `‖h(v₁) − h(v₀)‖ >= ‖v₁ − v₀‖/(2M)`.
    pub inv_sup: f64,
}

impl RadialMorph {
    /// `h(v)` for `v` relative to the centre.
    pub fn eval_local(&self, v: &Vector) -> Vector {
        self.path.at(self.ramp.value(v.norm())) * v
    }

    /// Stage adding `h − Γ(1)` to a map that is `Γ(1)u + const` near the centre.
    pub fn stage(&self) -> Stage {
        Stage::RadialMorph { center: self.center.clone(), path: self.path.clone(), ramp: self.ramp.clone() }
    }
}

/// Build the radial morph along `path` with the ramp `ramp`, requiring
/// `ζ·K < ε/(π M)` so that `‖A((1+σ)r) − A(r)‖ < εσ/(π M)`.
pub fn radial_morph(
    center: Vector,
    path: MatrixPath,
    ramp: SlowRamp,
    theta: f64,
    epsilon: f64,
) -> Result<RadialMorph, ConstructionError> {
    if !(epsilon > 0.0 && epsilon < FRAC_PI_2) {
        return Err(ConstructionError::Precondition(format!("ε = {epsilon} must lie in (0, π/2)")));
    }
    if path.twist_sup >= theta || path.det_min <= 0.0 {
        return Err(ConstructionError::Precondition(format!(
            "path twist {:.6} must be below θ = {theta:.6} with positive determinants",
            path.twist_sup
        )));
    }
    let m = path.sup_inv_norm;
    let allowed = epsilon / (PI * m);
    if ramp.zeta * path.lipschitz >= allowed {
        return Err(ConstructionError::Precondition(format!(
            "ramp slope ζ·K = {:.4e} must be below ε/(πM) = {allowed:.4e}",
            ramp.zeta * path.lipschitz
        )));
    }
    Ok(RadialMorph { center, path, ramp, certified_twist: theta + epsilon / 2.0, inv_sup: m })
}

/// Radii below this fraction of `max(1, ‖d‖)` are not resolved by `f64`
/// arithmetic around `d`, so constructions refuse them.
pub const NUMERIC_FLOOR: f64 = 1e-10;

fn check_numeric_floor(radius: f64, d: &Vector, what: &str) -> Result<(), ConstructionError> {
    let floor = NUMERIC_FLOOR * d.norm().max(1.0);
    if radius >= floor {
        Ok(())
    } else {
        Err(ConstructionError::Infeasible(format!(
            "{what} radius {radius:.3e} is below the numeric floor {floor:.3e}; use a larger θ − θ̂ or ε"
        )))
    }
}

/// Certificate and radii chosen while linearising.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linearization {
    pub map: TwistMap,
    pub matrix: Matrix,
    /// Radius about the point inside which the output is exactly affine.
    pub linear_radius: f64,
    pub outer_radius: f64,
}

fn ball_points(rng: &mut ChaCha8Rng, center: &Vector, radius: f64, count: usize) -> Vec<Vector> {
    (0..count).map(|_| Vector::from_vec(uniform_in_ball(rng, center.as_slice(), radius))).collect()
}

/// Replace `f` near `d` by its affine part `x ↦ f(d) + J_f(d)(x − d)`,
/// blending with a slow ramp. The change stays within distance `ε` of `f`
/// and the result has twist below `θ`.
pub fn linearize_at(f: &TwistMap, d: &Vector, epsilon: f64, theta: f64) -> Result<Linearization, ConstructionError> {
    let cert = certified(f)?;
    if cert >= theta {
        return Err(ConstructionError::Precondition(format!("certified twist {cert:.6} must be below θ = {theta:.6}")));
    }
    // The certificate already bounds tw(f), so θ̂ may sit just above it.
    let theta_hat = cert + 0.01 * (theta - cert);
    let (e, a) = f.eval_with_jacobian(d);
    let n = f.dim;
    let l = inverse_lipschitz(f, 17);
    let eps = epsilon.min(2.0 * (theta - theta_hat) / PI);
    let zeta = (eps / (2.0 * l)).min(0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    // (b): the affine error and the Jacobian drift are small on the R-ball.
    let affine_ok = |rng: &mut ChaCha8Rng, radius: f64, value_bound: f64, jac_bound: f64| -> bool {
        let mut pts = ball_points(rng, d, radius, 400);
        pts.extend((0..64).map(|_| d + Vector::from_vec(unit_vector(rng, n)) * radius));
        pts.iter().all(|x| {
            let (fx, jx) = f.eval_with_jacobian(x);
            let lin = &e + &a * (x - d);
            (lin - fx).norm() <= value_bound && op_norm(&(jx - &a)) <= jac_bound
        })
    };
    let mut r = eps / 2.0;
    let mut found = false;
    for _ in 0..60 {
        if affine_ok(&mut rng, r, eps / l * 0.5, zeta * 0.5) {
            found = true;
            break;
        }
        r *= 0.5;
    }
    if !found {
        return Err(ConstructionError::Infeasible("no radius makes f nearly affine at the point".into()));
    }
    // (c): the blend region is small compared with R.
    let norm_a = op_norm(&a);
    let mut q = r / 2.0;
    for _ in 0..60 {
        let ok_c = zeta + zeta * zeta * q <= eps / l;
        let ok_size = ball_points(&mut rng, d, q, 200)
            .iter()
            .all(|x| norm_a * (x - d).norm() + (f.eval(x) - &e).norm() <= eps / l * r / 2.0 * 0.5);
        if ok_c && ok_size {
            break;
        }
        q *= 0.5;
    }
    let p = q * (-1.0 / zeta).exp() * 0.5;
    check_numeric_floor(p, d, "blend")?;
    let ramp = SlowRamp::decreasing(p, q, zeta)?;
    let stage = Stage::LinearBlend { center: d.clone(), matrix: a.clone(), offset: e.clone(), weight: RadialWeight::Slow(ramp) };
    let map = f
        .then(stage)
        .with_certificate(Some(theta))
        .with_note(format!("linearize_at: R={r:.3e} Q={q:.3e} P={p:.3e} zeta={zeta:.3e} L={l:.3}"));
    Ok(Linearization { map, matrix: a, linear_radius: p, outer_radius: q })
}

/// Radius, capped at `cap`, of a ball about `d` on which `f` is exactly
/// affine by construction.
fn exact_affine_radius(f: &TwistMap, d: &Vector, cap: f64) -> Option<f64> {
    let r = f.affine_radius(d).min(cap);
    (r > 0.0).then_some(r)
}

/// Result of [`localize_translation`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub map: TwistMap,
    /// Radius about the point on which the map is an exact translation.
    pub translation_radius: f64,
}

/// Make `f` an exact translation `x ↦ x − d + f(d)` near `d`, changing it
/// only within distance `ε` of `d` and keeping twist below `θ`. When `f` is
/// already affine near `d` the linearisation step is skipped.
pub fn localize_translation(f: &TwistMap, d: &Vector, epsilon: f64, theta: f64) -> Result<Localization, ConstructionError> {
    let cert = certified(f)?;
    let n = f.dim;
    let outside = (d - &f.support.center).norm() - f.support.radius;
    if outside > 0.0 {
        return Ok(Localization { map: f.clone(), translation_radius: outside });
    }
    if cert >= theta {
        return Err(ConstructionError::Precondition(format!("certified twist {cert:.6} must be below θ = {theta:.6}")));
    }
    let (h, a, big_r, theta_lin) = match exact_affine_radius(f, d, epsilon / 2.0) {
        Some(r) => (f.clone(), f.jacobian(d), r, cert),
        None => {
            let theta_lin = cert + 0.6 * (theta - cert);
            let lin = linearize_at(f, d, epsilon / 2.0, theta_lin)?;
            (lin.map, lin.matrix, lin.linear_radius, theta_lin)
        }
    };
    let e = f.eval(d);
    let identity = Matrix::identity(n, n);
    if (&a - &identity).norm() <= 1e-15 {
        return Ok(Localization { map: h.with_certificate(Some(theta_lin)), translation_radius: big_r });
    }
    let path = straight_path(&a);
    let big_k = path.lipschitz;
    let m = path.sup_inv_norm;
    let j = path.sup_norm;
    // The morph's own ε is the whole gap; it then certifies θ_lin + gap/2.
    let gap = (theta - theta_lin).min(FRAC_PI_2 * 0.99);
    let theta_out = theta_lin + gap / 2.0;
    // (a): slope of the ramp; (b)-(e): the morph radius.
    let zeta = (gap / (PI * m * big_k)).min(1.0 / (2.0 * big_k * m)) * 0.9;
    let l_h = inverse_lipschitz(&h, 29);
    let c = big_r / l_h;
    let mut q = big_r * 0.5;
    for _ in 0..200 {
        let ok = j * q < c && j * q / (c - op_norm(&a) * q) < gap / PI && q < epsilon / 4.0 && j * q < epsilon / 4.0;
        if ok {
            break;
        }
        q *= 0.5;
    }
    let p = q * (-1.0 / zeta).exp() * 0.5;
    check_numeric_floor(p, d, "morph")?;
    let ramp = SlowRamp::new(p, q, zeta)?;
    let morph = radial_morph(d.clone(), path, ramp, theta_lin, gap)?;
    let g = h
        .then(morph.stage())
        .with_certificate(Some(theta_out))
        .with_note(format!("localize_translation: Q={q:.3e} P={p:.3e} zeta={zeta:.3e}"));
    debug_assert!((g.eval(d) - &e).norm() <= 1e-9 * e.norm().max(1.0));
    Ok(Localization { map: g, translation_radius: morph.ramp.p_inner - morph.ramp.half_width })
}

/// Add `ψ(‖x − d‖) a` to `f`, with a plateau bump that is 1 on `[0, P]` and
/// 0 beyond `Q`, provided the headroom allows it.
pub fn bump_translate(
    f: &TwistMap,
    d: &Vector,
    a: &Vector,
    q: f64,
    p: f64,
    theta: f64,
) -> Result<TwistMap, ConstructionError> {
    let cert = certified(f)?;
    if a.norm() == 0.0 {
        return Ok(f.clone());
    }
    let weight = RadialWeight::plateau(p, q)?;
    let slope = smooth_step_deriv_max() / (q - p);
    let l = inverse_lipschitz(f, 31);
    let max_norm = 2.0 * (theta - cert) / (PI * l * slope);
    if !(a.norm() < max_norm) {
        return Err(ConstructionError::BumpTooLarge { norm: a.norm(), max_norm });
    }
    // Ball bound: the extra angle is at most arcsin of the Lipschitz ratio.
    let extra = (a.norm() * slope * l).min(1.0).asin();
    let stage = Stage::BumpTranslate { center: d.clone(), direction: a.clone(), weight };
    Ok(f.then(stage).with_certificate(Some((cert + extra).min(theta))).with_note(format!(
        "bump_translate: |a|={:.3e} Q={q:.3e} P={p:.3e} L={l:.3}",
        a.norm()
    )))
}

/// Rotation field about `center` turning the direction of `d` into that of
/// `e` (both relative to `center`, equal lengths below `r0`), fading out
/// between `r0` and `r1` with the slow ramp of slope `(2/π)(θ − θ̂)/ρ`.
pub fn rotate_in_ball(
    center: &Vector,
    d: &Vector,
    e: &Vector,
    r0: f64,
    r1: f64,
    theta: f64,
    theta_hat: f64,
) -> Result<TwistMap, ConstructionError> {
    let n = center.len();
    if (d.norm() - e.norm()).abs() > 1e-12 * d.norm().max(1.0) || d.norm() >= r0 {
        return Err(ConstructionError::Precondition("need ‖d‖ = ‖e‖ < r0".into()));
    }
    let rho = if d.norm() == 0.0 { 0.0 } else { angle(d, e)? };
    if rho == 0.0 {
        return Ok(TwistMap::identity(n).with_certificate(Some(0.0)));
    }
    if rho >= theta_hat {
        return Err(ConstructionError::Precondition(format!("angle {rho:.6} must be below θ̂ = {theta_hat:.6}")));
    }
    let zeta = 2.0 / PI * (theta - theta_hat) / rho;
    let required = SlowRamp::min_ratio(zeta);
    if r1 / r0 <= required {
        return Err(ConstructionError::RatioTooSmall { required, actual: r1 / r0 });
    }
    let ramp = SlowRamp::decreasing(r0, r1, zeta)?;
    let (u, w) = plane_basis(d, e);
    let stage = Stage::RotateExpand(RotateExpand {
        center: center.clone(),
        plane_u: u,
        plane_w: w,
        angle: rho,
        rotation_ramp: Some(ramp),
        expansion: None,
        inverted: false,
        radii: vec![r0, r1],
    });
    Ok(TwistMap::from_stages(n, vec![stage])
        .with_certificate(Some(rho + (theta - theta_hat)))
        .with_note(format!("rotate_in_ball: rho={rho:.6} r0={r0:.3e} r1={r1:.3e}")))
}

/// Radii of a rotation-expansion stage in the domain of the forward map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InsertionRadii {
    pub s0: f64,
    pub s1: f64,
    pub s2: f64,
    pub r3: f64,
    pub r4: f64,
}

/// Forward stage `H(u) = ν(r)R(ψ(r))u` sending `from` to `to` (relative
/// vectors) with `K = ‖to‖/‖from‖ >= 1`, linear `K R_ρ` on the `s0`-ball.
/// The rotation ramp has log-slope `(2/π)·gap/ρ`.
fn forward_rotate_expand(
    center: &Vector,
    from: &Vector,
    to: &Vector,
    s0: f64,
    gap: f64,
) -> Result<(RotateExpand, InsertionRadii, f64), ConstructionError> {
    let k = to.norm() / from.norm();
    let rho = angle(from, to)?;
    let (u, w) = plane_basis(from, to);
    let (ramp, s1) = if rho > 0.0 {
        let zeta = 2.0 / PI * gap / rho;
        let s1 = s0 * SlowRamp::min_ratio(zeta) * 1.05;
        (Some(SlowRamp::decreasing(s0, s1, zeta)?), s1)
    } else {
        (None, s0)
    };
    let s2 = 3.0 * s1;
    let r3 = 2.0 * k * s2;
    let expansion = if k > 1.0 { Some(ExpansionProfile::new(k, s2, r3)?) } else { None };
    let r4 = r3 * PI / gap * 1.01;
    let twist = match (rho > 0.0, k > 1.0) {
        (false, false) => 0.0,
        (true, false) => rho + gap,
        (false, true) => FRAC_PI_2,
        (true, true) => FRAC_PI_2.max(rho + gap),
    };
    let stage = RotateExpand {
        center: center.clone(),
        plane_u: u,
        plane_w: w,
        angle: rho,
        rotation_ramp: ramp,
        expansion,
        inverted: false,
        radii: vec![s0, s1, s2, r3, r4],
    };
    Ok((stage, InsertionRadii { s0, s1, s2, r3, r4 }, twist))
}

/// Stage `G` about `center` with `G(d_rel) = e_rel`, linear on a ball of
/// radius at least `linear_radius` in the domain. Shrinking pairs use the
/// inverse of the expanding construction. Returns the stage, its radii and
/// the twist bound of `u ↦ G(u)` on its own.
pub fn rotate_expand_stage(
    center: &Vector,
    d_rel: &Vector,
    e_rel: &Vector,
    linear_radius: f64,
    gap: f64,
) -> Result<(RotateExpand, InsertionRadii, f64), ConstructionError> {
    if d_rel.norm() == 0.0 || e_rel.norm() == 0.0 {
        return Err(ConstructionError::Precondition("relative vectors must be nonzero".into()));
    }
    let k = e_rel.norm() / d_rel.norm();
    if k >= 1.0 {
        forward_rotate_expand(center, d_rel, e_rel, linear_radius, gap)
    } else {
        // H sends e_rel to d_rel and is linear on the s0-ball, whose image
        // is the ball of radius s0/k where G = H⁻¹ is linear.
        let (mut stage, radii, twist) = forward_rotate_expand(center, e_rel, d_rel, linear_radius * k, gap)?;
        stage.inverted = true;
        Ok((stage, radii, twist))
    }
}

/// Insert the pair `d ↦ e` into `f`, which must be a translation on the
/// ball `B(center, r4)`; `d − center` and `e − f(center)` must be shorter
/// than `r0`, with angle below `θ̂`. The result agrees with `f` outside the
/// `r4`-ball.
pub fn insert_pair_local(
    f: &TwistMap,
    center: &Vector,
    d: &Vector,
    e: &Vector,
    r0: f64,
    r4: f64,
    theta: f64,
    theta_hat: f64,
) -> Result<TwistMap, ConstructionError> {
    let cert = certified(f)?;
    let n = f.dim;
    if !(FRAC_PI_2 <= theta_hat && theta_hat < theta && theta < PI) {
        return Err(ConstructionError::Precondition("need π/2 <= θ̂ < θ < π".into()));
    }
    let image_center = f.eval(center);
    let d_rel = d - center;
    let e_rel = e - &image_center;
    if d_rel.norm() >= r0 || e_rel.norm() >= r0 {
        return Err(ConstructionError::Precondition("points must lie within r0 of the centre".into()));
    }
    let translation = &image_center - center;
    let local_ok = f.affine_radius(center) >= r4 && {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        ball_points(&mut rng, center, r4, 64)
            .iter()
            .all(|x| (f.eval(x) - x - &translation).norm() <= 1e-12 * x.norm().max(1.0))
    };
    if !local_ok {
        return Err(ConstructionError::Precondition("f is not a translation on the r4-ball".into()));
    }
    if d_rel.norm() == 0.0 && e_rel.norm() == 0.0 {
        return Ok(f.clone());
    }
    if d_rel.norm() == 0.0 || e_rel.norm() == 0.0 {
        return Err(ConstructionError::Precondition("only one of the points sits at the centre".into()));
    }
    let rho = angle(&d_rel, &e_rel)?;
    if rho >= theta_hat {
        return Err(ConstructionError::Precondition(format!("angle {rho:.6} must be below θ̂ = {theta_hat:.6}")));
    }
    let gap = theta - theta_hat;
    let k = e_rel.norm() / d_rel.norm();
    let linear = if k >= 1.0 { r0 / k } else { r0 };
    let (stage, radii, _) = rotate_expand_stage(center, &d_rel, &e_rel, linear, gap)?;
    let needed = if k >= 1.0 { radii.r4 * 1.0 } else { radii.r4 / k };
    if needed > r4 {
        return Err(ConstructionError::RatioTooSmall { required: needed / r0, actual: r4 / r0 });
    }
    let _ = n;
    Ok(f.then(Stage::RotateExpand(stage))
        .with_certificate(Some(FRAC_PI_2.max(rho + gap).max(cert + gap)))
        .with_note(format!("insert_pair_local: K={k:.4e} rho={rho:.6} radii={radii:?}")))
}

/// `(f + g)/2`, after checking the closeness bounds that keep it in the
/// class: `‖f − g‖ < ε_f` and `‖J_f − J_g‖ < δ_f`.
pub fn average_maps(f: &TwistMap, g: &TwistMap, theta: f64) -> Result<TwistMap, ConstructionError> {
    if f == g {
        return Ok(f.clone());
    }
    let cert = certified(f)?;
    let m = forward_lipschitz(f, 5).max(inverse_lipschitz(f, 6));
    let eps_f = 2.0 * (theta - cert) / PI * 0.99;
    let delta_f = (1.0 / (4.0 * m)).min(eps_f / m) * 0.99;
    let budget = VerifyBudget::light();
    let sampler = PointSampler::for_domain(&[f, g]);
    let pts = if sampler.is_empty() { Vec::new() } else { sampler.batch(budget.seed, 50, budget.points) };
    let far = (&f.offset - &g.offset).norm();
    let mut value_gap: f64 = far;
    let mut jac_gap: f64 = 0.0;
    for x in &pts {
        let (fy, fj) = f.eval_with_jacobian(x);
        let (gy, gj) = g.eval_with_jacobian(x);
        value_gap = value_gap.max((fy - gy).norm());
        jac_gap = jac_gap.max(op_norm(&(fj - gj)));
    }
    if value_gap >= eps_f {
        return Err(ConstructionError::Precondition(format!("‖f − g‖ ≈ {value_gap:.4e} is not below ε_f = {eps_f:.4e}")));
    }
    if jac_gap >= delta_f {
        return Err(ConstructionError::Precondition(format!(
            "‖J_f − J_g‖ ≈ {jac_gap:.4e} is not below δ_f = {delta_f:.4e}"
        )));
    }
    let extra = (jac_gap / 2.0 * m).min(1.0).asin();
    let out = TwistMap::from_stages(f.dim, vec![Stage::Average(Box::new(f.clone()), Box::new(g.clone()))]);
    Ok(out.with_certificate(Some((cert + extra).min(theta))).with_note("average_maps"))
}

/// Options for [`extend_finite_map`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtendOptions {
    pub schedule: HeadroomSchedule,
    /// Also make the map a translation near every domain point.
    pub nice: bool,
}

impl ExtendOptions {
    pub fn for_theta(theta: f64) -> Self {
        Self { schedule: HeadroomSchedule::for_theta(theta), nice: false }
    }
}

/// Outcome of the extension: the map and the plan that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extension {
    pub map: TwistMap,
    pub plan: String,
    pub certified_twist: f64,
    pub max_residual: f64,
}

/// A candidate interpolant: a core map fixing some pairs, plus bumps.
struct Plan {
    label: String,
    core: TwistMap,
    core_twist: f64,
    core_inv_lipschitz: f64,
    bumps: Vec<Stage>,
    bump_lipschitz: f64,
}

impl Plan {
    fn certified(&self) -> f64 {
        let ratio = self.bump_lipschitz * self.core_inv_lipschitz;
        if ratio >= 1.0 {
            f64::INFINITY
        } else {
            self.core_twist + ratio.asin()
        }
    }
}

/// Distance from each domain point to its nearest neighbour.
fn isolation_radii(sigma: &FiniteRelation) -> Vec<f64> {
    let t = sigma.len();
    (0..t)
        .map(|i| {
            (0..t)
                .filter(|&j| j != i)
                .map(|j| (&sigma.pairs[i].0 - &sigma.pairs[j].0).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn plateau_for(iso: f64, fallback: f64) -> (f64, f64) {
    let q = if iso.is_finite() { iso / 2.0 } else { fallback };
    (q / 16.0, q)
}

/// Bumps correcting `core` at the listed indices.
fn bumps_over(core: &TwistMap, sigma: &FiniteRelation, iso: &[f64], skip: &[usize]) -> (Vec<Stage>, f64) {
    let mut stages = Vec::new();
    let mut lip: f64 = 0.0;
    for (i, (d, e)) in sigma.pairs.iter().enumerate() {
        if skip.contains(&i) {
            continue;
        }
        let a = e - core.eval(d);
        if a.norm() == 0.0 {
            continue;
        }
        let (p, q) = plateau_for(iso[i], (4.0 * a.norm()).max(1.0));
        lip = lip.max(a.norm() * smooth_step_deriv_max() / (q - p));
        stages.push(Stage::BumpTranslate {
            center: d.clone(),
            direction: a,
            weight: RadialWeight::Plateau { p, q },
        });
    }
    (stages, lip)
}

/// Translation plus bumps; the translation minimises the worst bump slope.
fn translation_plan(sigma: &FiniteRelation, iso: &[f64]) -> Plan {
    let n = sigma.pairs[0].0.len();
    let slope = |t: &[f64]| -> f64 {
        let tv = Vector::from_column_slice(t);
        sigma
            .pairs
            .iter()
            .zip(iso)
            .map(|((d, e), &r)| {
                let a = e - d - &tv;
                let (p, q) = plateau_for(r, (4.0 * a.norm()).max(1.0));
                a.norm() * smooth_step_deriv_max() / (q - p)
            })
            .fold(0.0, f64::max)
    };
    let mut best: (Vec<f64>, f64) = (vec![0.0; n], f64::INFINITY);
    for (d, e) in &sigma.pairs {
        let start: Vec<f64> = (e - d).iter().copied().collect();
        let scale = sigma.pairs.iter().map(|(d2, e2)| (e2 - d2 - (e - d)).norm()).fold(1e-3, f64::max);
        let (z, v) = maximize(|t| -slope(t), &start, scale * 0.25, 400);
        if -v < best.1 {
            best = (z, -v);
        }
    }
    let t = Vector::from_vec(best.0);
    let core = if t.iter().all(|v| *v == 0.0) { TwistMap::identity(n).with_certificate(Some(0.0)) } else { TwistMap::translation(t) };
    let (bumps, lip) = bumps_over(&core, sigma, iso, &[]);
    Plan { label: "translation".into(), core, core_twist: 0.0, core_inv_lipschitz: 1.0, bumps, bump_lipschitz: lip }
}

/// Sup of `‖J_G⁻¹‖` along rays, with a 5% safety factor.
fn stage_inverse_lipschitz(core: &TwistMap, center: &Vector, outer: f64) -> f64 {
    let n = core.dim;
    let mut sup: f64 = 1.0;
    let steps = 2000;
    let inner = outer * 1e-6;
    for dir_index in 0..4 {
        let mut dir = Vector::zeros(n);
        let phase = dir_index as f64 * PI / 4.0;
        dir[0] = phase.cos();
        if n > 1 {
            dir[1] = phase.sin();
        }
        for i in 0..=steps {
            let r = inner * (outer * 1.1 / inner).powf(i as f64 / steps as f64);
            let j = core.jacobian(&(center + &dir * r));
            let inv = j.try_inverse().map_or(f64::INFINITY, |m| op_norm(&m));
            sup = sup.max(inv);
        }
    }
    sup * 1.05
}

/// Rotation-expansion about `d_a` matching the pair `b`, plus bumps.
fn core_plan(sigma: &FiniteRelation, iso: &[f64], a: usize, b: usize, gap: f64) -> Result<Plan, ConstructionError> {
    let n = sigma.pairs[0].0.len();
    let (da, ea) = &sigma.pairs[a];
    let (db, eb) = &sigma.pairs[b];
    let d_rel = db - da;
    let e_rel = eb - ea;
    let spread = sigma.pairs.iter().map(|(d, _)| (d - da).norm()).fold(0.0, f64::max);
    let (stage, radii, twist) = rotate_expand_stage(da, &d_rel, &e_rel, 2.0 * spread, gap)?;
    let core = TwistMap::from_stages(n, vec![Stage::Translation(ea - da), Stage::RotateExpand(stage)]);
    let outer = radii.r3.max(radii.s1) * 2.0;
    let outer = if e_rel.norm() < d_rel.norm() { outer / (e_rel.norm() / d_rel.norm()) } else { outer };
    let inv_lip = stage_inverse_lipschitz(&core, da, outer);
    let (bumps, lip) = bumps_over(&core, sigma, iso, &[a, b]);
    Ok(Plan {
        label: format!("rotate-expand about pair {a} towards pair {b}, gap {gap:.4}"),
        core,
        core_twist: twist,
        core_inv_lipschitz: inv_lip,
        bumps,
        bump_lipschitz: lip,
    })
}

/// Extend a finite partial bijection to a certified map `f` with
/// `f(d_i) = e_i` and twist below `θ`.
pub fn extend_finite_map(
    sigma: &FiniteRelation,
    theta: f64,
    options: &ExtendOptions,
) -> Result<Extension, ConstructionError> {
    if sigma.is_empty() {
        return Err(ConstructionError::Precondition("empty relation".into()));
    }
    if !sigma.is_bijection() {
        return Err(ConstructionError::Precondition("relation is not a bijection".into()));
    }
    let schedule = options.schedule;
    let tw = tw_finite(sigma);
    if tw >= schedule.theta_hat {
        return Err(ConstructionError::Infeasible(format!(
            "finite twist {:.4}° is not below θ̂ = {:.4}°",
            tw.to_degrees(),
            schedule.theta_hat.to_degrees()
        )));
    }
    let iso = isolation_radii(sigma);
    let t = sigma.len();
    let mut plans = vec![translation_plan(sigma, &iso)];
    for a in 0..t {
        for b in 0..t {
            if a == b {
                continue;
            }
            let rel_d = &sigma.pairs[b].0 - &sigma.pairs[a].0;
            let rel_e = &sigma.pairs[b].1 - &sigma.pairs[a].1;
            let rho = angle(&rel_d, &rel_e)?;
            let mut gaps = vec![(theta - rho) / 2.0, (theta - rho) / 3.0];
            if FRAC_PI_2 - rho > 0.05 {
                gaps.push(FRAC_PI_2 - rho);
            }
            for gap in gaps {
                if gap <= 0.0 {
                    continue;
                }
                if let Ok(plan) = core_plan(sigma, &iso, a, b, gap) {
                    plans.push(plan);
                }
            }
        }
    }
    let best = plans
        .into_iter()
        .min_by(|x, y| x.certified().total_cmp(&y.certified()))
        .expect("the translation plan always exists");
    let cert = best.certified();
    if !(cert < theta) {
        return Err(ConstructionError::Infeasible(format!(
            "best plan certifies {:.4}°, not below θ = {:.4}°",
            cert.to_degrees(),
            theta.to_degrees()
        )));
    }
    let mut stages = best.core.stages.clone();
    stages.extend(best.bumps);
    let mut map = TwistMap::from_stages(sigma.pairs[0].0.len(), stages).with_certificate(Some(cert));
    map.provenance = vec![format!(
        "extend_finite_map: plan {}, core twist {:.6}, bump slope {:.4e}, inverse Lipschitz {:.4}",
        best.label, best.core_twist, best.bump_lipschitz, best.core_inv_lipschitz
    )];
    if options.nice {
        map = make_nice(&map, sigma, theta, schedule.epsilon)?;
    }
    let max_residual = sigma.pairs.iter().map(|(d, e)| (map.eval(d) - e).norm()).fold(0.0, f64::max);
    let certified_twist = map.certified_twist.unwrap_or(cert);
    Ok(Extension { map, plan: best.label, certified_twist, max_residual })
}

/// True when `f` is an exact translation on a small ball about `d`.
fn is_translation_near(f: &TwistMap, d: &Vector, radius: f64) -> bool {
    let n = f.dim;
    if f.affine_radius(d) < radius {
        return false;
    }
    let shift = f.eval(d) - d;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    (0..64).all(|_| {
        let x = Vector::from_vec(uniform_in_ball(&mut rng, d.as_slice(), radius));
        let (y, j) = f.eval_with_jacobian(&x);
        (y - &x - &shift).norm() <= 1e-12 * x.norm().max(1.0) && (j - Matrix::identity(n, n)).norm() <= 1e-12
    })
}

/// Make `f` a translation near every domain point of `σ`, one point at a
/// time with geometrically shrinking budgets.
pub fn make_nice(f: &TwistMap, sigma: &FiniteRelation, theta: f64, epsilon: f64) -> Result<TwistMap, ConstructionError> {
    let iso = isolation_radii(sigma);
    let local = |i: usize| if iso[i].is_finite() { iso[i] / 4.0 } else { 1.0 };
    let pending: Vec<usize> = (0..sigma.len())
        .filter(|&i| !is_translation_near(f, &sigma.pairs[i].0, local(i) * 1e-3))
        .collect();
    let mut g = f.clone();
    for (step, &i) in pending.iter().enumerate() {
        let current = certified(&g)?;
        // Each remaining step gets an equal share of the remaining headroom.
        let cap = current + (theta - current) / (pending.len() - step) as f64;
        let eps = (epsilon / 2f64.powi(step as i32 + 1)).min(local(i));
        g = localize_translation(&g, &sigma.pairs[i].0, eps, cap)?.map;
    }
    Ok(g)
}

/// Random bijection close to a similarity, used by tests and demos: `t`
/// points in `[−5, 5]^n` at mutual distance at least 1, mapped by a random
/// similarity and then perturbed by a few percent of the isolation radius.
pub fn near_similarity_relation<R: Rng>(rng: &mut R, n: usize, t: usize, max_rotation: f64) -> FiniteRelation {
    let mut ds: Vec<Vector> = Vec::new();
    while ds.len() < t {
        let d = Vector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
        if ds.iter().all(|x| (x - &d).norm() >= 1.0) {
            ds.push(d);
        }
    }
    let scale = (rng.random_range((0.5f64).ln()..(2.0f64).ln())).exp();
    let rot_angle = rng.random_range(-max_rotation..max_rotation);
    let (u, w) = if n >= 2 {
        let uu = Vector::from_vec(unit_vector(rng, n));
        let ww = Vector::from_vec(unit_vector(rng, n));
        plane_basis(&uu, &ww)
    } else {
        (Vector::from_element(1, 1.0), Vector::zeros(1))
    };
    let rot = if n >= 2 { crate::geom_core::plane_rotation(&u, &w, rot_angle) } else { Matrix::identity(1, 1) };
    let shift = Vector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
    let pairs = ds
        .iter()
        .map(|d| {
            let iso = ds.iter().filter(|x| *x != d).map(|x| (x - d).norm()).fold(f64::INFINITY, f64::min);
            let iso = if iso.is_finite() { iso } else { 1.0 };
            let jitter = Vector::from_vec(unit_vector(rng, n)) * (0.02 * iso * rng.random::<f64>());
            (d.clone(), &rot * d * scale + &shift + jitter)
        })
        .collect();
    FiniteRelation::new(pairs)
}
