//! Finite geometric content of the twist-bounded posets: validity of finite
//! conditions, pairwise compatibility angles, and rasterised feasible regions
//! for inserting a new domain point.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom_core::{angle_slices, tw_finite_witness, FiniteRelation, Vector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PosetError {
    #[error("conditions collide: {0}")]
    Collision(String),
    #[error("condition sizes differ ({0} vs {1})")]
    SizeMismatch(usize, usize),
    #[error("invalid search box or resolution")]
    BadGrid,
    #[error("inserted point already lies in the domain")]
    PointInDomain,
}

/// A finite partial bijection with optional abstract integer tags and a
/// twist bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteCondition {
    pub pairs: FiniteRelation,
    #[serde(default)]
    pub tags: Option<Vec<i64>>,
    pub theta: f64,
}

impl FiniteCondition {
    pub fn new(pairs: FiniteRelation, theta: f64) -> Self {
        Self { pairs, tags: None, theta }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct P0Report {
    pub bijection: bool,
    pub twist: f64,
    /// `θ − tw(p)`.
    pub margin: f64,
    pub tags_distinct: bool,
    pub pass: bool,
}

/// Bijectivity, `tw(p) < θ` and tag distinctness.
pub fn check_p0(p: &FiniteCondition) -> P0Report {
    let bijection = p.pairs.is_bijection();
    let twist = tw_finite_witness(&p.pairs).map_or(0.0, |w| w.angle);
    let tags_distinct = match &p.tags {
        None => true,
        Some(t) => {
            let mut s = t.clone();
            s.sort_unstable();
            s.windows(2).all(|w| w[0] != w[1]) && t.len() == p.pairs.len()
        }
    };
    let margin = p.theta - twist;
    P0Report { bijection, twist, margin, tags_distinct, pass: bijection && margin > 0.0 && tags_distinct }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleTable {
    /// `∠(d_β^i − d_α^i, e_β^i − e_α^i)`, or `None` when a difference vanishes.
    pub angles: Vec<Option<f64>>,
    pub max: f64,
}

/// Index-matched angles between two equal-size relations.
pub fn pairwise_angle_table(a: &FiniteRelation, b: &FiniteRelation) -> Result<AngleTable, PosetError> {
    if a.len() != b.len() {
        return Err(PosetError::SizeMismatch(a.len(), b.len()));
    }
    let angles: Vec<Option<f64>> = a
        .pairs
        .iter()
        .zip(&b.pairs)
        .map(|((da, ea), (db, eb))| {
            let dv = db - da;
            let ev = eb - ea;
            angle_slices(dv.as_slice(), ev.as_slice()).ok()
        })
        .collect();
    let max = angles.iter().flatten().copied().fold(0.0, f64::max);
    Ok(AngleTable { angles, max })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeVerdict {
    pub valid: bool,
    pub twist: f64,
    /// Indices into the union (α pairs first) of the worst pair of pairs.
    pub witness: Option<(usize, usize)>,
}

/// Decide whether `σ_α ∪ σ_β` has twist below θ.
pub fn compat_merge_geometry(a: &FiniteRelation, b: &FiniteRelation, theta: f64) -> Result<MergeVerdict, PosetError> {
    let mut union = a.clone();
    for (db, eb) in &b.pairs {
        let mut duplicate = false;
        for (da, ea) in &a.pairs {
            let same_d = da == db;
            let same_e = ea == eb;
            if same_d && same_e {
                duplicate = true;
            } else if same_d || same_e {
                return Err(PosetError::Collision(format!("pair ({db:?}, {eb:?}) shares exactly one coordinate point")));
            }
        }
        if !duplicate {
            union.pairs.push((db.clone(), eb.clone()));
        }
    }
    let w = tw_finite_witness(&union);
    let twist = w.map_or(0.0, |w| w.angle);
    Ok(MergeVerdict { valid: twist < theta, twist, witness: w.map(|w| (w.first, w.second)) })
}

/// Axis-aligned search rectangle in the plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchBox {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

/// One raster sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RasterCell {
    pub x: f64,
    pub y: f64,
    pub feasible: bool,
    /// `θ − max_i angle_i`; negative when some constraint is violated.
    pub worst_margin: f64,
    /// A violated constraint, if any (the covering certificate).
    pub violated: Option<usize>,
}

/// Per-constraint diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub index: usize,
    /// Minimum of this constraint's angle over sampled points meeting every
    /// other constraint; `None` when no such point was found.
    pub blocking_angle: Option<f64>,
    /// Largest angle of this constraint over all samples.
    pub max_angle: f64,
    /// Point realising the blocking angle.
    pub blocking_point: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsertionRegion {
    pub nx: usize,
    pub ny: usize,
    pub search_box: SearchBox,
    pub theta: f64,
    /// Row-major raster, `y` outer and `x` inner.
    pub cells: Vec<RasterCell>,
    /// Feasible points found by refinement only.
    pub refined_feasible: Vec<(f64, f64)>,
    pub feasible_count: usize,
    pub constraints: Vec<ConstraintReport>,
    /// Best `θ − max_i angle_i` seen anywhere.
    pub best_margin: f64,
}

impl InsertionRegion {
    pub fn feasible(&self) -> bool {
        self.feasible_count > 0 || !self.refined_feasible.is_empty()
    }
}

/// Angles `angle(d − d_i, e − e_i)` for all constraints; coinciding `e`
/// counts as a full violation.
fn constraint_angles(p: &FiniteRelation, d: &Vector, e: &[f64; 2], out: &mut Vec<f64>) {
    out.clear();
    for (di, ei) in &p.pairs {
        let dv = [d[0] - di[0], d[1] - di[1]];
        let ev = [e[0] - ei[0], e[1] - ei[1]];
        out.push(angle_slices(&dv, &ev).unwrap_or(std::f64::consts::PI));
    }
}

/// Statistics of a batch of samples used for the per-constraint report.
#[derive(Clone)]
struct Tally {
    blocking: Vec<Option<(f64, f64, f64)>>,
    max_angle: Vec<f64>,
    best_margin: f64,
}

impl Tally {
    fn new(k: usize) -> Self {
        Self { blocking: vec![None; k], max_angle: vec![0.0; k], best_margin: f64::NEG_INFINITY }
    }

    fn record(&mut self, angles: &[f64], theta: f64, x: f64, y: f64) {
        let worst = angles.iter().copied().fold(0.0, f64::max);
        self.best_margin = self.best_margin.max(theta - worst);
        let violations = angles.iter().filter(|&&a| a > theta).count();
        for (j, &a) in angles.iter().enumerate() {
            self.max_angle[j] = self.max_angle[j].max(a);
            let others_ok = violations == 0 || (violations == 1 && a > theta);
            if others_ok && self.blocking[j].map_or(true, |(b, _, _)| a < b) {
                self.blocking[j] = Some((a, x, y));
            }
        }
    }

    fn merge(mut self, other: Tally) -> Tally {
        for j in 0..self.blocking.len() {
            self.max_angle[j] = self.max_angle[j].max(other.max_angle[j]);
            if let Some(o) = other.blocking[j] {
                if self.blocking[j].map_or(true, |s| o.0 < s.0) {
                    self.blocking[j] = Some(o);
                }
            }
        }
        self.best_margin = self.best_margin.max(other.best_margin);
        self
    }
}

/// Rasterise the set of `e` in the search box with
/// `angle(d − d_i, e − e_i) <= θ` for every pair of `p` (planar case).
/// Two refinement passes resample the most promising cells on a finer
/// sub-grid, both for feasibility and for the blocking angles.
pub fn insertion_region(
    p: &FiniteRelation,
    d: &Vector,
    search_box: SearchBox,
    nx: usize,
    ny: usize,
    theta: f64,
) -> Result<InsertionRegion, PosetError> {
    let b = search_box;
    if nx == 0 || ny == 0 || !(b.x_max > b.x_min) || !(b.y_max > b.y_min) || d.len() != 2 {
        return Err(PosetError::BadGrid);
    }
    if p.pairs.iter().any(|(di, _)| di == d) {
        return Err(PosetError::PointInDomain);
    }
    let k = p.len();
    let hx = (b.x_max - b.x_min) / nx as f64;
    let hy = (b.y_max - b.y_min) / ny as f64;
    let center = |i: usize, j: usize| (b.x_min + (i as f64 + 0.5) * hx, b.y_min + (j as f64 + 0.5) * hy);
    let rows: Vec<(Vec<RasterCell>, Tally)> = (0..ny)
        .into_par_iter()
        .map(|j| {
            let mut angles = Vec::with_capacity(k);
            let mut tally = Tally::new(k);
            let mut row = Vec::with_capacity(nx);
            for i in 0..nx {
                let (x, y) = center(i, j);
                constraint_angles(p, d, &[x, y], &mut angles);
                tally.record(&angles, theta, x, y);
                let worst = angles.iter().copied().fold(0.0, f64::max);
                let violated = angles.iter().position(|&a| a > theta);
                row.push(RasterCell { x, y, feasible: violated.is_none(), worst_margin: theta - worst, violated });
            }
            (row, tally)
        })
        .collect();
    let mut cells = Vec::with_capacity(nx * ny);
    let mut tally = Tally::new(k);
    for (row, t) in rows {
        cells.extend(row);
        tally = tally.merge(t);
    }
    let feasible_count = cells.iter().filter(|c| c.feasible).count();

    // Refinement: resample around the best cells for feasibility and around
    // each constraint's blocking point.
    let mut refined_feasible = Vec::new();
    let mut centers: Vec<(f64, f64)> = Vec::new();
    if feasible_count == 0 {
        let mut order: Vec<usize> = (0..cells.len()).collect();
        order.sort_by(|&a, &c| cells[c].worst_margin.total_cmp(&cells[a].worst_margin));
        centers.extend(order.iter().take(16).map(|&i| (cells[i].x, cells[i].y)));
    }
    for bl in tally.blocking.iter().flatten() {
        centers.push((bl.1, bl.2));
    }
    let (mut wx, mut wy) = (hx, hy);
    for _pass in 0..2 {
        let sub = 16usize;
        let mut next_centers = Vec::new();
        let mut angles = Vec::with_capacity(k);
        for &(cx, cy) in &centers {
            let mut local = Tally::new(k);
            for a in 0..=sub {
                for c in 0..=sub {
                    let x = cx - wx + 2.0 * wx * a as f64 / sub as f64;
                    let y = cy - wy + 2.0 * wy * c as f64 / sub as f64;
                    if x < b.x_min || x > b.x_max || y < b.y_min || y > b.y_max {
                        continue;
                    }
                    constraint_angles(p, d, &[x, y], &mut angles);
                    local.record(&angles, theta, x, y);
                    if feasible_count == 0 && angles.iter().all(|&a| a <= theta) {
                        refined_feasible.push((x, y));
                    }
                }
            }
            for bl in local.blocking.iter().flatten() {
                next_centers.push((bl.1, bl.2));
            }
            tally = tally.merge(local);
        }
        next_centers.sort_by(|a, c| a.0.total_cmp(&c.0).then(a.1.total_cmp(&c.1)));
        next_centers.dedup();
        centers = next_centers;
        wx *= 2.0 / sub as f64;
        wy *= 2.0 / sub as f64;
    }
    let constraints = (0..k)
        .map(|j| ConstraintReport {
            index: j,
            blocking_angle: tally.blocking[j].map(|b| b.0),
            max_angle: tally.max_angle[j],
            blocking_point: tally.blocking[j].map(|b| (b.1, b.2)),
        })
        .collect();
    Ok(InsertionRegion {
        nx,
        ny,
        search_box,
        theta,
        cells,
        refined_feasible,
        feasible_count,
        constraints,
        best_margin: tally.best_margin,
    })
}

/// The three-pair condition and inserted point of the 18° blocking example.
pub fn eighteen_degree_example() -> (FiniteRelation, Vector) {
    let p = FiniteRelation::from_coords(&[
        (vec![0.0, 10.0], vec![0.0, -9.0]),
        (vec![0.0, -10.0], vec![0.0, -10.0]),
        (vec![0.0, 11.0], vec![0.0, 11.0]),
    ]);
    (p, Vector::from_vec(vec![10.0, 0.0]))
}
