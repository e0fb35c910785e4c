//! Continuous paths of matrices `Γ: [0, 1] → M^n` with the constants the
//! radial morph needs: Lipschitz constant, sup of `‖Γ‖` and of `‖Γ⁻¹‖`, and
//! the largest matrix twist along the path.

use serde::{Deserialize, Serialize};

use crate::geom_core::{matrix_twist, op_norm, plane_rotation, Matrix, TwistBudget, Vector};

/// Shape of a matrix path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PathKind {
    /// `Γ(t) = M` for all `t`.
    Constant(Matrix),
    /// `Γ(t) = e^{t·log_scale} R_{t·angle}`, rotation in the plane of the
    /// orthonormal pair `(u, w)`.
    Conformal { u: Vector, w: Vector, log_scale: f64, angle: f64 },
    /// C¹ cubic Hermite interpolation of matrices at equally spaced `t`,
    /// with centred-difference tangents.
    Sampled { knots: Vec<Matrix> },
}

/// A matrix path with its certified-by-grid constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixPath {
    pub kind: PathKind,
    /// Lipschitz constant `K` of `t ↦ Γ(t)` (grid sup of `‖Γ′‖`).
    pub lipschitz: f64,
    /// `J = sup ‖Γ(t)‖`.
    pub sup_norm: f64,
    /// `M = sup ‖Γ(t)⁻¹‖`.
    pub sup_inv_norm: f64,
    /// Largest matrix twist along the grid.
    pub twist_sup: f64,
    /// Smallest determinant along the grid.
    pub det_min: f64,
}

const STAT_GRID: usize = 256;

impl MatrixPath {
    pub fn new(kind: PathKind) -> Self {
        let mut path = Self { kind, lipschitz: 0.0, sup_norm: 0.0, sup_inv_norm: 0.0, twist_sup: 0.0, det_min: f64::INFINITY };
        path.compute_stats();
        path
    }

    pub fn constant(m: Matrix) -> Self {
        Self::new(PathKind::Constant(m))
    }

    pub fn conformal(u: Vector, w: Vector, scale: f64, angle: f64) -> Self {
        Self::new(PathKind::Conformal { u, w, log_scale: scale.ln(), angle })
    }

    pub fn sampled(knots: Vec<Matrix>) -> Self {
        assert!(knots.len() >= 2, "a sampled path needs at least two knots");
        Self::new(PathKind::Sampled { knots })
    }

    pub fn dimension(&self) -> usize {
        match &self.kind {
            PathKind::Constant(m) => m.nrows(),
            PathKind::Conformal { u, .. } => u.len(),
            PathKind::Sampled { knots } => knots[0].nrows(),
        }
    }

    /// `Γ(t)` for `t` clamped to `[0, 1]`.
    pub fn at(&self, t: f64) -> Matrix {
        self.at_with_deriv(t).0
    }

    /// `Γ(t)` and `Γ′(t)`.
    pub fn at_with_deriv(&self, t: f64) -> (Matrix, Matrix) {
        let t = t.clamp(0.0, 1.0);
        match &self.kind {
            PathKind::Constant(m) => (m.clone(), Matrix::zeros(m.nrows(), m.ncols())),
            PathKind::Conformal { u, w, log_scale, angle } => {
                let n = u.len();
                let scale = (t * log_scale).exp();
                let rot = plane_rotation(u, w, t * angle);
                let gen = w * u.transpose() - u * w.transpose();
                let value = &rot * scale;
                let deriv = (&rot * *log_scale + &gen * &rot * *angle) * scale;
                debug_assert_eq!(value.nrows(), n);
                (value, deriv)
            }
            PathKind::Sampled { knots } => {
                let segs = knots.len() - 1;
                let h = 1.0 / segs as f64;
                let k = ((t / h) as usize).min(segs - 1);
                let s = (t - k as f64 * h) / h;
                let tangent = |i: usize| -> Matrix {
                    if i == 0 {
                        (&knots[1] - &knots[0]) / h
                    } else if i == segs {
                        (&knots[segs] - &knots[segs - 1]) / h
                    } else {
                        (&knots[i + 1] - &knots[i - 1]) / (2.0 * h)
                    }
                };
                let (p0, p1) = (&knots[k], &knots[k + 1]);
                let (m0, m1) = (tangent(k) * h, tangent(k + 1) * h);
                let (s2, s3) = (s * s, s * s * s);
                let value = p0 * (2.0 * s3 - 3.0 * s2 + 1.0)
                    + &m0 * (s3 - 2.0 * s2 + s)
                    + p1 * (-2.0 * s3 + 3.0 * s2)
                    + &m1 * (s3 - s2);
                let dvalue = (p0 * (6.0 * s2 - 6.0 * s)
                    + &m0 * (3.0 * s2 - 4.0 * s + 1.0)
                    + p1 * (-6.0 * s2 + 6.0 * s)
                    + &m1 * (3.0 * s2 - 2.0 * s))
                    / h;
                (value, dvalue)
            }
        }
    }

    fn compute_stats(&mut self) {
        let n = self.dimension();
        let budget = TwistBudget { seeds: 16 * n.max(1), refine: 2, sweep: 512, seed: 11 };
        let mut k: f64 = 0.0;
        let mut j: f64 = 0.0;
        let mut m: f64 = 0.0;
        let mut tw: f64 = 0.0;
        let mut det_min = f64::INFINITY;
        for i in 0..=STAT_GRID {
            let t = i as f64 / STAT_GRID as f64;
            let (g, dg) = self.at_with_deriv(t);
            k = k.max(op_norm(&dg));
            j = j.max(op_norm(&g));
            let det = g.determinant();
            det_min = det_min.min(det);
            match g.clone().try_inverse() {
                Some(inv) => m = m.max(op_norm(&inv)),
                None => m = f64::INFINITY,
            }
            tw = tw.max(matrix_twist(&g, budget).unwrap_or(std::f64::consts::PI));
        }
        // Midpoint derivatives guard against the grid missing a peak of ‖Γ′‖.
        for i in 0..STAT_GRID {
            let t = (i as f64 + 0.5) / STAT_GRID as f64;
            k = k.max(op_norm(&self.at_with_deriv(t).1));
        }
        self.lipschitz = k * 1.01;
        self.sup_norm = j;
        self.sup_inv_norm = m;
        self.twist_sup = tw;
        self.det_min = det_min;
    }

    /// Largest `‖Γ(t)⁻¹‖` together with the smallest determinant; used by
    /// membership checks in `N^n_θ`.
    pub fn grid_points(&self, count: usize) -> Vec<(f64, Matrix)> {
        (0..=count).map(|i| {
            let t = i as f64 / count as f64;
            (t, self.at(t))
        }).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn constant_identity() {
        let p = MatrixPath::constant(Matrix::identity(2, 2));
        assert_eq!(p.lipschitz, 0.0);
        assert_eq!(p.sup_inv_norm, 1.0);
        assert_eq!(p.twist_sup, 0.0);
    }

    #[test]
    fn conformal_endpoints_and_derivative() {
        let u = Vector::from_vec(vec![1.0, 0.0]);
        let w = Vector::from_vec(vec![0.0, 1.0]);
        let p = MatrixPath::conformal(u, w, 2.0, 0.8);
        assert!((p.at(0.0) - Matrix::identity(2, 2)).norm() < 1e-15);
        let end = p.at(1.0);
        assert!((end.determinant() - 4.0).abs() < 1e-12);
        assert!((p.twist_sup - 0.8).abs() < 1e-6);
        assert!((p.sup_inv_norm - 1.0).abs() < 1e-12);
        for &t in &[0.1, 0.5, 0.9] {
            let h = 1e-6;
            let fd = (p.at(t + h) - p.at(t - h)) / (2.0 * h);
            assert!((fd - p.at_with_deriv(t).1).norm() < 1e-7);
        }
        assert!(p.twist_sup < PI / 2.0);
    }

    #[test]
    fn sampled_is_c1_and_interpolates() {
        let knots: Vec<Matrix> = (0..5)
            .map(|i| {
                let t = i as f64 / 4.0;
                Matrix::from_row_slice(2, 2, &[1.0 + t, 0.3 * t, -0.2 * t * t, 1.0])
            })
            .collect();
        let p = MatrixPath::sampled(knots.clone());
        for (i, k) in knots.iter().enumerate() {
            assert!((p.at(i as f64 / 4.0) - k).norm() < 1e-14);
        }
        for &t in &[0.1, 0.25, 0.6, 0.74] {
            let h = 1e-6;
            let fd = (p.at(t + h) - p.at(t - h)) / (2.0 * h);
            assert!((fd - p.at_with_deriv(t).1).norm() < 1e-6);
        }
        let left = p.at_with_deriv(0.25 - 1e-12).1;
        let right = p.at_with_deriv(0.25 + 1e-12).1;
        assert!((left - right).norm() < 1e-8);
    }
}
