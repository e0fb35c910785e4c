//! Candidate maps as ordered lists of analytic stages.
//!
//! A map is evaluated by starting from `y = x`, `J = I` and letting each
//! stage update the pair. Most stages add a displacement `D(x)` that
//! vanishes outside a ball, so a stage acting on a map that is a translation
//! near its ball performs local surgery. `Compose` applies a whole map to the
//! running value, `LinearBlend` interpolates the running value towards an
//! affine map, and `Inverse` contributes the displacement of another map's
//! inverse.

pub mod path;
pub mod verify;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom_core::{plane_rotation, GeomError, Matrix, Vector};
use crate::scalar_shapes::{smooth_step, smooth_step_deriv, ExpansionProfile, ShapeError, SlowRamp};

pub use path::{MatrixPath, PathKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("inversion did not converge (residual {residual:e})")]
    InverseDiverged { residual: f64 },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// Radial weight equal to 1 near the centre and 0 far away.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RadialWeight {
    /// `S((q − r)/(q − p))`: 1 on `[0, p]`, 0 on `[q, ∞)`.
    Plateau { p: f64, q: f64 },
    /// Decreasing slow ramp: 1 below its `P`, 0 above its `Q`.
    Slow(SlowRamp),
}

impl RadialWeight {
    pub fn plateau(p: f64, q: f64) -> Result<Self, ShapeError> {
        if !(p >= 0.0 && p < q && q.is_finite()) {
            return Err(ShapeError::PlateauOrder { p, q });
        }
        Ok(Self::Plateau { p, q })
    }

    pub fn value_deriv(&self, r: f64) -> (f64, f64) {
        match self {
            Self::Plateau { p, q } => {
                let w = q - p;
                let t = (q - r) / w;
                (smooth_step(t), -smooth_step_deriv(t) / w)
            }
            Self::Slow(ramp) => {
                let (v, d) = ramp.value_deriv(r);
                match ramp.direction {
                    crate::scalar_shapes::RampDirection::Decreasing => (v, d),
                    crate::scalar_shapes::RampDirection::Increasing => (1.0 - v, -d),
                }
            }
        }
    }

    /// Radius beyond which the weight vanishes.
    pub fn outer(&self) -> f64 {
        match self {
            Self::Plateau { q, .. } => *q,
            Self::Slow(ramp) => ramp.q,
        }
    }

    /// Radius below which the weight is 1.
    pub fn inner(&self) -> f64 {
        match self {
            Self::Plateau { p, .. } => *p,
            Self::Slow(ramp) => ramp.p,
        }
    }
}

/// Named globally defined smooth maps, stored as displacements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AnalyticMap {
    /// `u ↦ (1 − 2w(|u|))u` about `center`: a point reflection inside the
    /// plateau that collapses a sphere in the transition shell.
    Fold { center: Vector, weight: RadialWeight },
    /// `u ↦ (1 + w(|u|)(s − 1))u`: radial scaling by `s` near `center`.
    RadialScale { center: Vector, scale: f64, weight: RadialWeight },
}

/// Rotation in a plane combined with a radial expansion, both about
/// `center`. The forward map is `H(u) = ν(r) R(ρ·ψ(r)) u`; when `inverted`
/// the stage applies `H⁻¹` instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotateExpand {
    pub center: Vector,
    pub plane_u: Vector,
    pub plane_w: Vector,
    pub angle: f64,
    /// Decreasing ramp: 1 near the centre where the full rotation applies.
    pub rotation_ramp: Option<SlowRamp>,
    /// Radial scale profile; `None` means `ν ≡ 1`.
    pub expansion: Option<ExpansionProfile>,
    pub inverted: bool,
    /// Construction radii `r0 <= … <= r4` kept for diagnostics.
    pub radii: Vec<f64>,
}

/// One step of a map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Stage {
    Translation(Vector),
    GlobalC1(AnalyticMap),
    /// `D(u) = (Γ(φ(r)) − Γ(1)) u` about `center`, for an increasing ramp `φ`.
    RadialMorph { center: Vector, path: MatrixPath, ramp: SlowRamp },
    /// `D(u) = w(r) a`.
    BumpTranslate { center: Vector, direction: Vector, weight: RadialWeight },
    RotateExpand(RotateExpand),
    /// `y ← y + w(r)(A u + b − y)`.
    LinearBlend { center: Vector, matrix: Matrix, offset: Vector, weight: RadialWeight },
    /// Adds the displacement of `(f + g)/2`.
    Average(Box<TwistMap>, Box<TwistMap>),
    /// Adds the displacement of `x ↦ inner(x − shift_in) + shift_out`.
    Conjugate { shift_in: Vector, shift_out: Vector, inner: Box<TwistMap> },
    /// `y ← g(y)`.
    Compose(Box<TwistMap>),
    /// Adds the displacement of `g⁻¹`.
    Inverse(Box<TwistMap>),
}

/// Effect of one stage on the affine ball about a point.
enum AffineZone {
    /// The stage overwrites the running value with an affine map on a ball.
    Resets(f64),
    /// The running value stays affine on a ball of this radius if it was.
    Keeps(f64),
}

/// Ball `B(center, radius)` outside which a map is a translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportBall {
    pub center: Vector,
    pub radius: f64,
}

impl SupportBall {
    fn point(n: usize) -> Self {
        Self { center: Vector::zeros(n), radius: 0.0 }
    }

    fn contains(&self, x: &Vector) -> bool {
        (x - &self.center).norm() < self.radius
    }

    /// Smallest ball about the current centre containing both balls, or the
    /// other ball when the current one is empty.
    fn absorb(&mut self, center: &Vector, radius: f64) {
        if radius <= 0.0 {
            return;
        }
        if self.radius <= 0.0 {
            self.center = center.clone();
            self.radius = radius;
            return;
        }
        let d = (center - &self.center).norm();
        if d + radius <= self.radius {
            return;
        }
        if d + self.radius <= radius {
            self.center = center.clone();
            self.radius = radius;
            return;
        }
        let new_radius = 0.5 * (d + radius + self.radius);
        let dir = (center - &self.center) / d;
        self.center = &self.center + dir * (new_radius - self.radius);
        self.radius = new_radius;
    }
}

/// A centre with the band of radii where a stage does its work; used to
/// concentrate samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Stratum {
    pub center: Vector,
    pub inner: f64,
    pub outer: f64,
}

/// An element of the candidate map class, as a list of stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwistMap {
    pub dim: usize,
    pub stages: Vec<Stage>,
    /// Proven upper bound on the twist, when one is known.
    pub certified_twist: Option<f64>,
    /// Radius about the origin outside which the map is `x ↦ x + offset`.
    pub support_radius: f64,
    pub offset: Vector,
    /// Ball outside which the map is `x ↦ x + offset`.
    pub support: SupportBall,
    /// Construction history.
    pub provenance: Vec<String>,
}

const NEWTON_STEPS: usize = 200;

impl TwistMap {
    pub fn identity(dim: usize) -> Self {
        Self::from_stages(dim, Vec::new())
    }

    pub fn translation(c: Vector) -> Self {
        let dim = c.len();
        let mut map = Self::from_stages(dim, vec![Stage::Translation(c)]);
        map.certified_twist = Some(0.0);
        map
    }

    /// Build a map and derive its support ball and offset from the stages.
    pub fn from_stages(dim: usize, stages: Vec<Stage>) -> Self {
        let mut ball = SupportBall::point(dim);
        let mut offset = Vector::zeros(dim);
        for stage in &stages {
            stage.update_support(&mut ball, &mut offset);
        }
        let support_radius = if ball.radius > 0.0 { ball.center.norm() + ball.radius } else { 0.0 };
        Self { dim, stages, certified_twist: None, support_radius, offset, support: ball, provenance: Vec::new() }
    }

    pub fn with_certificate(mut self, twist: Option<f64>) -> Self {
        self.certified_twist = twist;
        self
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.provenance.push(note.into());
        self
    }

    /// Append a stage, keeping the support bookkeeping in sync.
    pub fn then(&self, stage: Stage) -> Self {
        let mut stages = self.stages.clone();
        stages.push(stage);
        let mut map = Self::from_stages(self.dim, stages);
        map.provenance = self.provenance.clone();
        map
    }

    /// `g ∘ self`.
    pub fn compose_with(&self, g: &TwistMap) -> Self {
        self.then(Stage::Compose(Box::new(g.clone())))
    }

    /// The inverse map, evaluated by Newton iteration on `self`.
    pub fn inverse(&self) -> Self {
        if let Some(inner) = self.inverse_view() {
            return inner.clone();
        }
        let mut map = Self::from_stages(self.dim, vec![Stage::Inverse(Box::new(self.clone()))]);
        map.certified_twist = self.certified_twist;
        map.provenance = vec!["inverse".to_string()];
        map
    }

    /// When the map is exactly `g⁻¹`, return `g`.
    pub fn inverse_view(&self) -> Option<&TwistMap> {
        match self.stages.as_slice() {
            [Stage::Inverse(g)] => Some(g),
            _ => None,
        }
    }

    /// Ball containing the image of the support ball.
    pub fn image_support(&self) -> SupportBall {
        SupportBall { center: &self.support.center + &self.offset, radius: self.support.radius }
    }

    fn check_dim(&self, x: &Vector) {
        assert_eq!(x.len(), self.dim, "point dimension does not match the map");
    }

    pub fn eval(&self, x: &Vector) -> Vector {
        self.check_dim(x);
        if !self.support.contains(x) {
            return x + &self.offset;
        }
        self.apply_stages(x, None)
    }

    pub fn jacobian(&self, x: &Vector) -> Matrix {
        self.eval_with_jacobian(x).1
    }

    pub fn eval_with_jacobian(&self, x: &Vector) -> (Vector, Matrix) {
        self.check_dim(x);
        if !self.support.contains(x) {
            return (x + &self.offset, Matrix::identity(self.dim, self.dim));
        }
        let mut jac = Matrix::identity(self.dim, self.dim);
        let y = self.apply_stages(x, Some(&mut jac));
        (y, jac)
    }

    /// Evaluate through every stage, ignoring the support shortcut.
    pub fn eval_stages(&self, x: &Vector) -> (Vector, Matrix) {
        let mut jac = Matrix::identity(self.dim, self.dim);
        let y = self.apply_stages(x, Some(&mut jac));
        (y, jac)
    }

    fn apply_stages(&self, x: &Vector, mut jac: Option<&mut Matrix>) -> Vector {
        let mut y = x.clone();
        for stage in &self.stages {
            stage.apply(x, &mut y, jac.as_deref_mut());
        }
        y
    }

    /// `f⁻¹(y)` with residual `‖f(x) − y‖ <= 1e−10·max(1, ‖y‖)`.
    pub fn inverse_eval(&self, y: &Vector) -> Result<Vector, MapError> {
        self.check_dim(y);
        if let Some(inner) = self.inverse_view() {
            return Ok(inner.eval(y));
        }
        let image = self.image_support();
        if !image.contains(y) {
            return Ok(y - &self.offset);
        }
        let (x, residual) = self.solve(y);
        if residual <= residual_tolerance(y) {
            Ok(x)
        } else {
            Err(MapError::InverseDiverged { residual })
        }
    }

    /// Jacobian of `f⁻¹` at `y`, as `J_f(f⁻¹(y))⁻¹`.
    pub fn inverse_jacobian(&self, y: &Vector) -> Result<Matrix, MapError> {
        if let Some(inner) = self.inverse_view() {
            return Ok(inner.jacobian(y));
        }
        let x = self.inverse_eval(y)?;
        self.jacobian(&x).try_inverse().ok_or(MapError::Geom(GeomError::SingularMatrix))
    }

    /// Radius of a ball about `x` on which the map is exactly affine, read
    /// off the stage structure; zero when no such ball is known.
    pub fn affine_radius(&self, x: &Vector) -> f64 {
        let mut radius = f64::INFINITY;
        for stage in &self.stages {
            match stage.affine_zone(x) {
                AffineZone::Resets(r) => radius = r,
                AffineZone::Keeps(r) => radius = radius.min(r),
            }
        }
        radius.max(0.0)
    }

    /// Best preimage found and its residual.
    fn solve(&self, y: &Vector) -> (Vector, f64) {
        let tol = residual_tolerance(y);
        let mut seeds = vec![self.chain_seed(y), y - &self.offset];
        seeds.dedup();
        let mut best: Option<(Vector, f64)> = None;
        for seed in seeds {
            let (x, res) = self.newton(y, seed, tol);
            if best.as_ref().is_none_or(|(_, r)| res < *r) {
                best = Some((x, res));
            }
            if best.as_ref().is_some_and(|(_, r)| *r <= tol) {
                break;
            }
        }
        best.expect("at least one seed")
    }

    /// Remove the global translations, then invert the remaining stages one
    /// at a time in reverse order, treating each as if it acted alone. Exact
    /// when the stage balls are disjoint.
    fn chain_seed(&self, y: &Vector) -> Vector {
        let mut v = y.clone();
        for stage in &self.stages {
            if let Stage::Translation(c) = stage {
                v -= c;
            }
        }
        for stage in self.stages.iter().rev() {
            if !matches!(stage, Stage::Translation(_)) {
                v = stage.isolated_inverse(&v);
            }
        }
        v
    }

    fn newton(&self, y: &Vector, seed: Vector, tol: f64) -> (Vector, f64) {
        let mut x = seed;
        let (mut fx, mut jac) = self.eval_with_jacobian(&x);
        let mut res = (&fx - y).norm();
        for _ in 0..NEWTON_STEPS {
            if res <= tol {
                break;
            }
            let Some(step) = jac.clone().lu().solve(&(y - &fx)) else { break };
            let mut scale = 1.0;
            let mut improved = false;
            for _ in 0..40 {
                let trial = &x + &step * scale;
                let (ft, jt) = self.eval_with_jacobian(&trial);
                let rt = (&ft - y).norm();
                if rt < res {
                    x = trial;
                    fx = ft;
                    jac = jt;
                    res = rt;
                    improved = true;
                    break;
                }
                scale *= 0.5;
            }
            if !improved {
                break;
            }
        }
        (x, res)
    }

    /// Domain-side sampling strata.
    pub fn strata(&self) -> Vec<Stratum> {
        if let Some(inner) = self.inverse_view() {
            return inner.image_strata();
        }
        let mut out = Vec::new();
        let mut offset = Vector::zeros(self.dim);
        for stage in &self.stages {
            stage.strata(&offset, &mut out);
            if let Stage::Translation(c) = stage {
                offset += c;
            } else if let Stage::Compose(g) = stage {
                offset += &g.offset;
            }
        }
        if out.is_empty() && self.support.radius > 0.0 {
            out.push(Stratum { center: self.support.center.clone(), inner: 0.0, outer: self.support.radius });
        }
        out
    }

    /// Image-side sampling strata: stage centres pushed forward, radii
    /// scaled by the local singular values.
    pub fn image_strata(&self) -> Vec<Stratum> {
        if let Some(inner) = self.inverse_view() {
            return inner.strata();
        }
        self.strata()
            .into_iter()
            .map(|s| {
                let (fc, jc) = self.eval_with_jacobian(&s.center);
                let sv = jc.singular_values();
                let lo = sv.min().max(1e-6);
                let hi = sv.max().max(1.0);
                Stratum { center: fc, inner: s.inner * lo.min(1.0), outer: s.outer * hi }
            })
            .collect()
    }
}

fn residual_tolerance(y: &Vector) -> f64 {
    1e-10 * y.norm().max(1.0)
}

/// `J += a ⊗ (g′(r) u/r)` for a radial displacement term `g(r) a`.
fn add_radial_outer(jac: &mut Matrix, column: &Vector, deriv: f64, u: &Vector, r: f64) {
    if r > 0.0 && deriv != 0.0 {
        jac.ger(deriv / r, column, u, 1.0);
    }
}

impl RotateExpand {
    fn rotation_angle(&self, r: f64) -> (f64, f64) {
        match &self.rotation_ramp {
            Some(ramp) => {
                let (v, d) = ramp.value_deriv(r);
                (self.angle * v, self.angle * d)
            }
            None => (self.angle, 0.0),
        }
    }

    fn nu(&self, r: f64) -> (f64, f64) {
        match &self.expansion {
            Some(e) => e.nu(r),
            None => (1.0, 0.0),
        }
    }

    fn radius_map_inverse(&self, s: f64) -> f64 {
        match &self.expansion {
            Some(e) => e.inverse_radius(s),
            None => s,
        }
    }

    fn generator(&self) -> Matrix {
        &self.plane_w * self.plane_u.transpose() - &self.plane_u * self.plane_w.transpose()
    }

    /// Forward `H(u)` with Jacobian.
    fn forward(&self, u: &Vector) -> (Vector, Matrix) {
        let r = u.norm();
        let (nu, dnu) = self.nu(r);
        let (psi, dpsi) = self.rotation_angle(r);
        let rot = plane_rotation(&self.plane_u, &self.plane_w, psi);
        let ru = &rot * u;
        let mut jac = &rot * nu;
        if r > 0.0 {
            let column = &ru * dnu + (self.generator() * &ru) * (nu * dpsi);
            jac.ger(1.0 / r, &column, u, 1.0);
        }
        (ru * nu, jac)
    }

    /// `H⁻¹(v)`: solve the radius from `m(r) = |v|`, then undo the rotation.
    fn backward(&self, v: &Vector) -> Vector {
        let s = v.norm();
        if s == 0.0 {
            return v.clone();
        }
        let r = self.radius_map_inverse(s);
        let (nu, _) = self.nu(r);
        let (psi, _) = self.rotation_angle(r);
        plane_rotation(&self.plane_u, &self.plane_w, -psi) * v / nu
    }

    /// The stage's own map `u ↦ G(u)` relative to the centre.
    pub fn local(&self, u: &Vector) -> (Vector, Matrix) {
        if self.inverted {
            let w = self.backward(u);
            let (_, jac) = self.forward(&w);
            let inv = jac.try_inverse().unwrap_or_else(|| Matrix::identity(u.len(), u.len()));
            (w, inv)
        } else {
            self.forward(u)
        }
    }

    pub fn local_inverse(&self, v: &Vector) -> Vector {
        if self.inverted {
            self.forward(v).0
        } else {
            self.backward(v)
        }
    }

    /// Radius beyond which the stage is the identity.
    pub fn outer_radius(&self) -> f64 {
        let rot = self.rotation_ramp.as_ref().map_or(0.0, |r| r.q);
        let exp = self.expansion.as_ref().map_or(0.0, |e| e.r3);
        if self.rotation_ramp.is_none() && self.angle != 0.0 {
            return f64::INFINITY;
        }
        rot.max(exp)
    }

    pub fn inner_radius(&self) -> f64 {
        let rot = self.rotation_ramp.as_ref().map(|r| r.p);
        let exp = self.expansion.as_ref().map(|e| e.s2);
        match (rot, exp) {
            (Some(a), Some(b)) => a.min(b),
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => 0.0,
        }
    }
}

impl AnalyticMap {
    fn parts(&self) -> (&Vector, &RadialWeight) {
        match self {
            Self::Fold { center, weight } | Self::RadialScale { center, weight, .. } => (center, weight),
        }
    }

    /// Displacement coefficient `k(w)` in `D = k(w(r)) u` and its slope.
    fn coefficient(&self) -> f64 {
        match self {
            Self::Fold { .. } => -2.0,
            Self::RadialScale { scale, .. } => scale - 1.0,
        }
    }
}

impl Stage {
    /// Update the running value and Jacobian for the input point `x`.
    fn apply(&self, x: &Vector, y: &mut Vector, jac: Option<&mut Matrix>) {
        match self {
            Stage::Translation(c) => *y += c,
            Stage::GlobalC1(map) => {
                let (center, weight) = map.parts();
                let u = x - center;
                let r = u.norm();
                if r >= weight.outer() {
                    return;
                }
                let k = map.coefficient();
                let (w, dw) = weight.value_deriv(r);
                *y += &u * (k * w);
                if let Some(j) = jac {
                    for i in 0..j.nrows() {
                        j[(i, i)] += k * w;
                    }
                    add_radial_outer(j, &u, k * dw, &u, r);
                }
            }
            Stage::RadialMorph { center, path, ramp } => {
                let u = x - center;
                let r = u.norm();
                if r >= ramp.q {
                    return;
                }
                let (phi, dphi) = ramp.value_deriv(r);
                let (g, dg) = path.at_with_deriv(phi);
                let outer = path.at(1.0);
                let diff = &g - &outer;
                *y += &diff * &u;
                if let Some(j) = jac {
                    *j += &diff;
                    add_radial_outer(j, &(&dg * &u), dphi, &u, r);
                }
            }
            Stage::BumpTranslate { center, direction, weight } => {
                let u = x - center;
                let r = u.norm();
                if r >= weight.outer() {
                    return;
                }
                let (w, dw) = weight.value_deriv(r);
                *y += direction * w;
                if let Some(j) = jac {
                    add_radial_outer(j, direction, dw, &u, r);
                }
            }
            Stage::RotateExpand(stage) => {
                let u = x - &stage.center;
                if u.norm() >= stage.outer_radius() {
                    return;
                }
                let (g, jg) = stage.local(&u);
                *y += &g - &u;
                if let Some(j) = jac {
                    *j += jg;
                    for i in 0..j.nrows() {
                        j[(i, i)] -= 1.0;
                    }
                }
            }
            Stage::LinearBlend { center, matrix, offset, weight } => {
                let u = x - center;
                let r = u.norm();
                if r >= weight.outer() {
                    return;
                }
                let (w, dw) = weight.value_deriv(r);
                let gap = matrix * &u + offset - &*y;
                *y += &gap * w;
                if let Some(j) = jac {
                    let pull = (matrix - &*j) * w;
                    *j += pull;
                    add_radial_outer(j, &gap, dw, &u, r);
                }
            }
            Stage::Average(f, g) => {
                let (fy, fj) = f.eval_with_jacobian(x);
                let (gy, gj) = g.eval_with_jacobian(x);
                *y += (fy + gy) * 0.5 - x;
                if let Some(j) = jac {
                    *j += (fj + gj) * 0.5;
                    for i in 0..j.nrows() {
                        j[(i, i)] -= 1.0;
                    }
                }
            }
            Stage::Conjugate { shift_in, shift_out, inner } => {
                let (iy, ij) = inner.eval_with_jacobian(&(x - shift_in));
                *y += iy + shift_out - x;
                if let Some(j) = jac {
                    *j += ij;
                    for i in 0..j.nrows() {
                        j[(i, i)] -= 1.0;
                    }
                }
            }
            Stage::Compose(g) => {
                let (gy, gj) = g.eval_with_jacobian(y);
                *y = gy;
                if let Some(j) = jac {
                    *j = gj * &*j;
                }
            }
            Stage::Inverse(g) => {
                let (pre, residual) = if g.image_support().contains(x) { g.solve(x) } else { (x - &g.offset, 0.0) };
                debug_assert!(residual.is_finite());
                *y += &pre - x;
                if let Some(j) = jac {
                    let gj = g.jacobian(&pre);
                    let inv = gj.try_inverse().unwrap_or_else(|| Matrix::identity(x.len(), x.len()));
                    *j += inv;
                    for i in 0..j.nrows() {
                        j[(i, i)] -= 1.0;
                    }
                }
            }
        }
    }

    fn update_support(&self, ball: &mut SupportBall, offset: &mut Vector) {
        match self {
            Stage::Translation(c) => *offset += c,
            Stage::GlobalC1(map) => {
                let (center, weight) = map.parts();
                ball.absorb(center, weight.outer());
            }
            Stage::RadialMorph { center, ramp, .. } => ball.absorb(center, ramp.q),
            Stage::BumpTranslate { center, weight, .. } => ball.absorb(center, weight.outer()),
            Stage::RotateExpand(stage) => ball.absorb(&stage.center, stage.outer_radius()),
            Stage::LinearBlend { center, weight, .. } => ball.absorb(center, weight.outer()),
            Stage::Average(f, g) => {
                ball.absorb(&f.support.center, f.support.radius);
                ball.absorb(&g.support.center, g.support.radius);
                *offset += (&f.offset + &g.offset) * 0.5;
            }
            Stage::Conjugate { shift_in, shift_out, inner } => {
                ball.absorb(&(&inner.support.center + shift_in), inner.support.radius);
                *offset += &inner.offset + shift_out;
            }
            Stage::Compose(g) => {
                ball.absorb(&(&g.support.center - &*offset), g.support.radius);
                *offset += &g.offset;
            }
            Stage::Inverse(g) => {
                let image = g.image_support();
                ball.absorb(&image.center, image.radius);
                *offset -= &g.offset;
            }
        }
    }

    /// How the stage affects exact affineness of the running value near `x`.
    fn affine_zone(&self, x: &Vector) -> AffineZone {
        let radial = |center: &Vector, inner: f64, outer: f64| -> f64 {
            let r = (x - center).norm();
            if r < inner {
                inner - r
            } else if r > outer {
                r - outer
            } else {
                0.0
            }
        };
        match self {
            Stage::Translation(_) => AffineZone::Keeps(f64::INFINITY),
            Stage::GlobalC1(map) => {
                let (center, weight) = map.parts();
                AffineZone::Keeps(radial(center, weight.inner(), weight.outer()))
            }
            Stage::RadialMorph { center, ramp, .. } => AffineZone::Keeps(radial(center, ramp.p, ramp.q)),
            Stage::BumpTranslate { center, weight, .. } => AffineZone::Keeps(radial(center, weight.inner(), weight.outer())),
            Stage::RotateExpand(stage) => {
                let rotation = stage.rotation_ramp.as_ref().map_or(f64::INFINITY, |ramp| ramp.p);
                let expansion = stage.expansion.as_ref().map_or(f64::INFINITY, |e| e.s2);
                let mut linear = rotation.min(expansion);
                if stage.inverted {
                    linear *= stage.expansion.as_ref().map_or(1.0, |e| e.k);
                }
                AffineZone::Keeps(radial(&stage.center, linear, stage.outer_radius()))
            }
            Stage::LinearBlend { center, weight, .. } => {
                let r = (x - center).norm();
                if r < weight.inner() {
                    AffineZone::Resets(weight.inner() - r)
                } else {
                    AffineZone::Keeps(radial(center, 0.0, weight.outer()))
                }
            }
            Stage::Average(f, g) => AffineZone::Keeps(f.affine_radius(x).min(g.affine_radius(x))),
            Stage::Conjugate { shift_in, inner, .. } => AffineZone::Keeps(inner.affine_radius(&(x - shift_in))),
            Stage::Compose(g) => AffineZone::Keeps(if g.support.radius == 0.0 { f64::INFINITY } else { 0.0 }),
            Stage::Inverse(g) => {
                let image = g.image_support();
                AffineZone::Keeps(radial(&image.center, 0.0, image.radius))
            }
        }
    }

    /// Preimage of `v` under this stage acting alone on the identity.
    fn isolated_inverse(&self, v: &Vector) -> Vector {
        match self {
            Stage::Translation(c) => v - c,
            Stage::GlobalC1(AnalyticMap::RadialScale { center, scale, weight }) => {
                let w = v - center;
                let s = w.norm();
                if s == 0.0 {
                    return v.clone();
                }
                // `r(1 + w(r)(scale − 1)) = s` is monotone for admissible maps.
                let (mut lo, mut hi) = (0.0, s.max(s / scale.min(1.0)));
                for _ in 0..100 {
                    let mid = 0.5 * (lo + hi);
                    let m = mid * (1.0 + weight.value_deriv(mid).0 * (scale - 1.0));
                    if m < s {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                center + w * (0.5 * (lo + hi) / s)
            }
            Stage::GlobalC1(AnalyticMap::Fold { .. }) => v.clone(),
            Stage::RadialMorph { center, path, ramp } => {
                let w = v - center;
                if w.norm() == 0.0 {
                    return v.clone();
                }
                let n = w.len();
                let outer = path.at(1.0);
                let mut identity = Matrix::identity(n, n);
                identity -= &outer;
                let pre = |r: f64| -> Option<Vector> {
                    let a = &identity + path.at(ramp.value(r));
                    a.lu().solve(&w)
                };
                // Bisection on `|A(r)⁻¹w| − r`, positive at 0 and negative far out.
                let (mut lo, mut hi) = (0.0, ramp.q.max(w.norm()) * 4.0);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    match pre(mid) {
                        Some(u) if u.norm() > mid => lo = mid,
                        _ => hi = mid,
                    }
                    if hi - lo <= 1e-15 * hi {
                        break;
                    }
                }
                match pre(0.5 * (lo + hi)) {
                    Some(u) => center + u,
                    None => v.clone(),
                }
            }
            Stage::BumpTranslate { center, direction, weight } => {
                let mut x = v.clone();
                for _ in 0..100 {
                    let r = (&x - center).norm();
                    let next = v - direction * weight.value_deriv(r).0;
                    let moved = (&next - &x).norm();
                    x = next;
                    if moved <= 1e-15 * x.norm().max(1.0) {
                        break;
                    }
                }
                x
            }
            Stage::RotateExpand(stage) => {
                let w = v - &stage.center;
                &stage.center + stage.local_inverse(&w)
            }
            Stage::LinearBlend { .. } => v.clone(),
            Stage::Average(f, g) => v - (&f.offset + &g.offset) * 0.5,
            Stage::Conjugate { shift_in, shift_out, inner } => {
                let inner_target = v - shift_out;
                let (pre, _) = inner.solve(&inner_target);
                pre + shift_in
            }
            Stage::Compose(g) => g.solve(v).0,
            Stage::Inverse(g) => g.eval(v),
        }
    }

    fn strata(&self, offset: &Vector, out: &mut Vec<Stratum>) {
        let mut push = |center: &Vector, inner: f64, outer: f64| {
            out.push(Stratum { center: center.clone(), inner, outer });
        };
        match self {
            Stage::Translation(_) => {}
            Stage::GlobalC1(map) => {
                let (center, weight) = map.parts();
                push(center, weight.inner(), weight.outer());
            }
            Stage::RadialMorph { center, ramp, .. } => push(center, ramp.p, ramp.q),
            Stage::BumpTranslate { center, weight, .. } => push(center, weight.inner(), weight.outer()),
            Stage::RotateExpand(stage) => push(&stage.center, stage.inner_radius(), stage.outer_radius()),
            Stage::LinearBlend { center, weight, .. } => push(center, weight.inner(), weight.outer()),
            Stage::Average(f, g) => {
                out.extend(f.strata());
                out.extend(g.strata());
            }
            Stage::Conjugate { shift_in, inner, .. } => {
                out.extend(inner.strata().into_iter().map(|s| Stratum { center: s.center + shift_in, ..s }));
            }
            Stage::Compose(g) => {
                out.extend(g.strata().into_iter().map(|s| Stratum { center: s.center - offset, ..s }));
            }
            Stage::Inverse(g) => out.extend(g.image_strata()),
        }
    }
}

/// Convenience for building vectors from slices.
pub fn vector(values: &[f64]) -> Vector {
    DVector::from_column_slice(values)
}
