//! Angles between vectors, twists of finite relations and of matrices,
//! operator norms and the ball angle bound.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use crate::sampling::standard_normal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

use crate::optim;

/// Real vector of a fixed ambient dimension.
pub type Vector = DVector<f64>;
/// Square real matrix.
pub type Matrix = DMatrix<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("angle undefined for a zero vector")]
    ZeroVector,
    #[error("matrix is singular")]
    SingularMatrix,
    #[error("ball bound needs distance {distance} >= r + s = {radii}")]
    BallTooClose { distance: f64, radii: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

/// Angle in `[0, π]` between two nonzero vectors.
pub fn angle(v: &Vector, w: &Vector) -> Result<f64, GeomError> {
    angle_slices(v.as_slice(), w.as_slice())
}

/// Slice form of [`angle`].
pub fn angle_slices(v: &[f64], w: &[f64]) -> Result<f64, GeomError> {
    if v.len() != w.len() {
        return Err(GeomError::DimensionMismatch { expected: v.len(), found: w.len() });
    }
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nw = w.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nv == 0.0 || nw == 0.0 || !nv.is_finite() || !nw.is_finite() {
        return Err(GeomError::ZeroVector);
    }
    Ok(unit_angle(v, w, nv, nw))
}

/// Angle for vectors whose norms are known and nonzero.
fn unit_angle(v: &[f64], w: &[f64], nv: f64, nw: f64) -> f64 {
    // The half-chord formula stays accurate for nearly parallel and nearly
    // antipodal vectors, where arccos of the cosine loses precision.
    let mut diff = 0.0;
    let mut sum = 0.0;
    for (a, b) in v.iter().zip(w) {
        let (ua, ub) = (a / nv, b / nw);
        diff += (ua - ub) * (ua - ub);
        sum += (ua + ub) * (ua + ub);
    }
    let cos = ((sum - diff) / 4.0).clamp(-1.0, 1.0);
    let chord = 2.0 * diff.sqrt().atan2(sum.sqrt());
    if cos.abs() < 0.9 {
        cos.acos()
    } else {
        chord
    }
}

/// Angle that treats a zero argument as "no constraint" and returns 0.
pub fn angle_or_zero(v: &[f64], w: &[f64]) -> f64 {
    angle_slices(v, w).unwrap_or(0.0)
}

/// A finite set of pairs `(d, e)` in `R^n × R^n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FiniteRelation {
    pub pairs: Vec<(Vector, Vector)>,
}

/// A pair of pairs realising the twist of a relation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwistWitness {
    pub first: usize,
    pub second: usize,
    pub angle: f64,
}

impl FiniteRelation {
    pub fn new(pairs: Vec<(Vector, Vector)>) -> Self {
        Self { pairs }
    }

    /// Build from plain coordinate arrays.
    pub fn from_coords(pairs: &[(Vec<f64>, Vec<f64>)]) -> Self {
        Self {
            pairs: pairs
                .iter()
                .map(|(d, e)| (Vector::from_column_slice(d), Vector::from_column_slice(e)))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Ambient dimension, if any pair is present.
    pub fn dimension(&self) -> Option<usize> {
        self.pairs.first().map(|(d, _)| d.len())
    }

    /// The transposed relation `{(e, d)}`.
    pub fn transpose(&self) -> Self {
        Self { pairs: self.pairs.iter().map(|(d, e)| (e.clone(), d.clone())).collect() }
    }

    /// True when no domain point and no range point repeats.
    pub fn is_bijection(&self) -> bool {
        let n = self.pairs.len();
        for i in 0..n {
            for j in (i + 1)..n {
                let same_d = self.pairs[i].0 == self.pairs[j].0;
                let same_e = self.pairs[i].1 == self.pairs[j].1;
                if same_d != same_e {
                    return false;
                }
            }
        }
        true
    }
}

/// Largest angle `∠(d₁ − d₀, e₁ − e₀)` over valid pairs of pairs, with the
/// witnessing indices. `None` when no valid pair exists.
pub fn tw_finite_witness(rel: &FiniteRelation) -> Option<TwistWitness> {
    let mut best: Option<TwistWitness> = None;
    let n = rel.pairs.len();
    for i in 0..n {
        for j in (i + 1)..n {
            let dv = &rel.pairs[j].0 - &rel.pairs[i].0;
            let ev = &rel.pairs[j].1 - &rel.pairs[i].1;
            if let Ok(a) = angle(&dv, &ev) {
                if best.map_or(true, |b| a > b.angle) {
                    best = Some(TwistWitness { first: i, second: j, angle: a });
                }
            }
        }
    }
    best
}

/// Twist of a finite relation; 0 when there is no valid pair of pairs.
pub fn tw_finite(rel: &FiniteRelation) -> f64 {
    tw_finite_witness(rel).map_or(0.0, |w| w.angle)
}

/// Largest singular value.
pub fn op_norm(y: &Matrix) -> f64 {
    if y.nrows() == 0 {
        return 0.0;
    }
    y.singular_values().max()
}

/// Sampling budget for [`matrix_twist`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwistBudget {
    /// Number of sphere seeds; the default is `64·n`.
    pub seeds: usize,
    /// Number of best seeds refined by local ascent.
    pub refine: usize,
    /// Points of the dense sweep used for `n = 2`.
    pub sweep: usize,
    pub seed: u64,
}

impl TwistBudget {
    pub fn for_dimension(n: usize) -> Self {
        Self { seeds: 64 * n.max(1), refine: 4, sweep: 4096, seed: 0x7157 }
    }
}

/// Lower-bound estimate of `sup ∠(v, Y v)` over the unit sphere.
pub fn matrix_twist(y: &Matrix, budget: TwistBudget) -> Result<f64, GeomError> {
    let n = y.nrows();
    if y.ncols() != n {
        return Err(GeomError::DimensionMismatch { expected: n, found: y.ncols() });
    }
    if n == 0 {
        return Ok(0.0);
    }
    let det = y.determinant();
    if det == 0.0 || !det.is_finite() || y.clone().try_inverse().is_none() {
        return Err(GeomError::SingularMatrix);
    }
    let objective = |v: &[f64]| -> f64 {
        let vv = Vector::from_column_slice(v);
        let yv = y * &vv;
        angle(&vv, &yv).unwrap_or(0.0)
    };
    if n == 1 {
        return Ok(objective(&[1.0]));
    }
    let mut best = 0.0f64;
    if n == 2 {
        let m = budget.sweep.max(16);
        let mut best_t = 0.0;
        for k in 0..m {
            let t = PI * k as f64 / m as f64;
            let a = objective(&[t.cos(), t.sin()]);
            if a > best {
                best = a;
                best_t = t;
            }
        }
        let step = PI / m as f64;
        let (_, v) = optim::maximize(
            |p: &[f64]| objective(&[p[0].cos(), p[0].sin()]),
            &[best_t],
            step,
            200,
        );
        return Ok(best.max(v));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(budget.seed);
    let mut seeds: Vec<(f64, Vec<f64>)> = Vec::with_capacity(budget.seeds);
    for _ in 0..budget.seeds.max(1) {
        let v: Vec<f64> = (0..n).map(|_| standard_normal(&mut rng)).collect();
        let a = objective(&v);
        seeds.push((a, v));
    }
    for k in 0..n {
        let mut e = vec![0.0; n];
        e[k] = 1.0;
        seeds.push((objective(&e), e));
    }
    seeds.sort_by(|a, b| b.0.total_cmp(&a.0));
    for (a, v) in seeds.iter().take(budget.refine.max(1)) {
        best = best.max(*a);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let (_, refined) = optim::maximize(objective, v, 0.1 * norm, 400);
        best = best.max(refined);
    }
    Ok(best)
}

/// Membership report for `N^n_θ` (positive determinant and twist below θ).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NThetaReport {
    pub member: bool,
    pub det: f64,
    pub twist: f64,
    /// `θ − twist`; positive when the twist condition holds.
    pub twist_margin: f64,
}

pub fn in_n_theta(y: &Matrix, theta: f64, budget: TwistBudget) -> NThetaReport {
    let det = y.determinant();
    let twist = matrix_twist(y, budget).unwrap_or(f64::INFINITY);
    NThetaReport { member: det > 0.0 && twist < theta, det, twist, twist_margin: theta - twist }
}

/// The bound `π(r + s)/(2T)` on the angle between `w − v` and `y − x` when
/// `‖v − x‖ ≤ r`, `‖w − y‖ ≤ s` and `‖y − x‖ = T`.
pub fn ball_angle_bound(distance: f64, r: f64, s: f64) -> Result<f64, GeomError> {
    if r == 0.0 && s == 0.0 {
        return Ok(0.0);
    }
    if !(distance >= r + s) || r < 0.0 || s < 0.0 {
        return Err(GeomError::BallTooClose { distance, radii: r + s });
    }
    Ok(PI * (r + s) / (2.0 * distance))
}

/// Plane rotation by `angle` in the oriented plane spanned by orthonormal
/// `u`, `w`, acting as the identity on the orthogonal complement.
pub fn plane_rotation(u: &Vector, w: &Vector, angle: f64) -> Matrix {
    let n = u.len();
    let (c, s) = (angle.cos(), angle.sin());
    let mut m = Matrix::identity(n, n);
    m += (u * u.transpose() + w * w.transpose()) * (c - 1.0);
    m += (w * u.transpose() - u * w.transpose()) * s;
    m
}

/// Orthonormal pair `(u, w)` spanning the plane of `a` and `b` with `u`
/// along `a`; when they are parallel a fixed complementary axis is used.
pub fn plane_basis(a: &Vector, b: &Vector) -> (Vector, Vector) {
    let n = a.len();
    let u = a.normalize();
    let mut w = b - &u * u.dot(b);
    if w.norm() <= 1e-14 * b.norm().max(1e-300) {
        let k = (0..n).min_by(|&i, &j| u[i].abs().total_cmp(&u[j].abs())).unwrap_or(0);
        let mut e = Vector::zeros(n);
        if n > 1 {
            e[k] = 1.0;
        }
        w = &e - &u * u.dot(&e);
    }
    let wn = w.norm();
    if wn > 0.0 {
        w /= wn;
    }
    (u, w)
}

/// Draw a uniformly random rotation with determinant one.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Matrix {
    let g = Matrix::from_fn(n, n, |_, _| standard_normal(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            for i in 0..n {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    if q.determinant() < 0.0 {
        for i in 0..n {
            q[(i, 0)] = -q[(i, 0)];
        }
    }
    q
}
