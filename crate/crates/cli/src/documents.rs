//! File formats read and written by the command-line tool.

use std::io::Read;
use std::panic::{catch_unwind, AssertUnwindSafe};

use serde::{Deserialize, Serialize};
use twistmap_core::geom_core::{FiniteRelation, Vector};
use twistmap_core::map_algebra::{Stage, TwistMap};

use crate::CliError;

/// JSON form of a map: its stage list plus the derived quantities, which
/// are checked against the stages on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapDocument {
    pub dimension: usize,
    /// Twist bound the map was built for, in radians.
    pub theta: Option<f64>,
    pub stages: Vec<Stage>,
    /// Proven twist bound in radians.
    pub certified_twist: Option<f64>,
    pub support_radius: f64,
    pub offset: Vec<f64>,
    pub provenance: Vec<String>,
}

impl MapDocument {
    pub fn from_map(map: &TwistMap, theta: Option<f64>) -> Self {
        Self {
            dimension: map.dim,
            theta,
            stages: map.stages.clone(),
            certified_twist: map.certified_twist,
            support_radius: map.support_radius,
            offset: map.offset.as_slice().to_vec(),
            provenance: map.provenance.clone(),
        }
    }

    /// Rebuild the map, rejecting documents whose derived fields disagree
    /// with their stages or whose stages have the wrong dimension.
    pub fn to_map(&self) -> Result<TwistMap, CliError> {
        if self.dimension == 0 {
            return Err(CliError::Schema("dimension must be positive".into()));
        }
        let dim = self.dimension;
        let stages = self.stages.clone();
        let built = catch_unwind(AssertUnwindSafe(|| {
            let map = TwistMap::from_stages(dim, stages);
            let probe = map.support.center.clone();
            let _ = map.eval(&probe);
            let _ = map.jacobian(&probe);
            map
        }))
        .map_err(|_| CliError::Schema("stages do not match the declared dimension".into()))?;
        let mut map = built;
        if map.support_radius != self.support_radius {
            return Err(CliError::Schema(format!(
                "support_radius {} does not match the stages ({})",
                self.support_radius, map.support_radius
            )));
        }
        if map.offset.as_slice() != self.offset.as_slice() {
            return Err(CliError::Schema("offset does not match the stages".into()));
        }
        if let Some(t) = self.certified_twist {
            if !(t.is_finite() && t >= 0.0) {
                return Err(CliError::Schema("certified_twist must be a non-negative number".into()));
            }
        }
        map.certified_twist = self.certified_twist;
        map.provenance = self.provenance.clone();
        Ok(map)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("documents always serialise");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Schema(format!("map document: {e}")))
    }

    pub fn load(path: &str) -> Result<Self, CliError> {
        Self::from_json(&read_input(path)?)
    }
}

/// Read a file, or standard input for `-`.
pub fn read_input(path: &str) -> Result<String, CliError> {
    if path == "-" {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s).map_err(|e| CliError::Schema(format!("stdin: {e}")))?;
        return Ok(s);
    }
    std::fs::read_to_string(path).map_err(|e| CliError::Schema(format!("{path}: {e}")))
}

/// Parse a pairs CSV. The header names the columns `d0 … d(n−1), e0 …
/// e(n−1)`, which fixes the dimension; each row is one pair.
pub fn parse_pairs(text: &str) -> Result<FiniteRelation, CliError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| CliError::Schema(format!("pairs header: {e}")))?.clone();
    let cols = header.len();
    if cols == 0 || cols % 2 != 0 {
        return Err(CliError::Schema(format!("pairs header needs 2n columns, found {cols}")));
    }
    let n = cols / 2;
    for (i, name) in header.iter().enumerate() {
        let expected = if i < n { format!("d{i}") } else { format!("e{}", i - n) };
        if name != expected {
            return Err(CliError::Schema(format!("pairs header column {i} is {name:?}, expected {expected:?}")));
        }
    }
    let mut pairs = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::Schema(format!("pairs row {}: {e}", row + 1)))?;
        if record.len() != cols {
            return Err(CliError::Schema(format!("pairs row {} has {} columns, expected {cols}", row + 1, record.len())));
        }
        let values = record
            .iter()
            .map(|v| v.parse::<f64>().ok().filter(|x| x.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| CliError::Schema(format!("pairs row {} has a non-numeric entry", row + 1)))?;
        pairs.push((values[..n].to_vec(), values[n..].to_vec()));
    }
    Ok(FiniteRelation::from_coords(&pairs))
}

/// Write a relation in the pairs CSV format.
pub fn format_pairs(rel: &FiniteRelation) -> String {
    let n = rel.dimension().unwrap_or(1);
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<String> = (0..n).map(|i| format!("d{i}")).chain((0..n).map(|i| format!("e{i}"))).collect();
    w.write_record(&header).expect("in-memory write");
    for (d, e) in &rel.pairs {
        let row: Vec<String> = d.iter().chain(e.iter()).map(|v| v.to_string()).collect();
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("CSV output is UTF-8")
}

/// A planar finite condition for insertion queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionDocument {
    /// `[[d_x, d_y], [e_x, e_y]]` per pair.
    pub pairs: Vec<(Vec<f64>, Vec<f64>)>,
}

impl ConditionDocument {
    pub fn from_json(text: &str) -> Result<FiniteRelation, CliError> {
        let doc: Self = serde_json::from_str(text).map_err(|e| CliError::Schema(format!("condition document: {e}")))?;
        if doc.pairs.iter().any(|(d, e)| d.len() != 2 || e.len() != 2) {
            return Err(CliError::Schema("condition pairs must be planar points".into()));
        }
        if doc.pairs.iter().flat_map(|(d, e)| d.iter().chain(e)).any(|v| !v.is_finite()) {
            return Err(CliError::Schema("condition coordinates must be finite".into()));
        }
        Ok(FiniteRelation::from_coords(&doc.pairs))
    }
}

/// One axis of an evaluation grid: `count` equally spaced points from
/// `lo` to `hi` inclusive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridAxis {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl GridAxis {
    pub fn point(&self, i: usize) -> f64 {
        if self.count <= 1 {
            self.lo
        } else {
            self.lo + (self.hi - self.lo) * i as f64 / (self.count - 1) as f64
        }
    }
}

/// Parse `lo:hi:count` axes separated by commas. A single axis applies to
/// every coordinate.
pub fn parse_grid(text: &str, dim: usize) -> Result<Vec<GridAxis>, CliError> {
    let bad = || CliError::Usage(format!("grid {text:?} is not lo:hi:count[,lo:hi:count…]"));
    let axes = text
        .split(',')
        .map(|part| {
            let fields: Vec<&str> = part.trim().split(':').collect();
            let [lo, hi, count] = fields.as_slice() else { return Err(bad()) };
            let lo: f64 = lo.parse().map_err(|_| bad())?;
            let hi: f64 = hi.parse().map_err(|_| bad())?;
            let count: usize = count.parse().map_err(|_| bad())?;
            if !(lo.is_finite() && hi.is_finite()) {
                return Err(bad());
            }
            Ok(GridAxis { lo, hi, count })
        })
        .collect::<Result<Vec<_>, _>>()?;
    match axes.len() {
        1 => Ok(vec![axes[0]; dim]),
        k if k == dim => Ok(axes),
        k => Err(CliError::Usage(format!("grid has {k} axes but the map has dimension {dim}"))),
    }
}

/// Parse a comma-separated point.
pub fn parse_point(text: &str) -> Result<Vector, CliError> {
    let values = text
        .split(',')
        .map(|v| v.trim().parse::<f64>().ok().filter(|x| x.is_finite()))
        .collect::<Option<Vec<f64>>>()
        .ok_or_else(|| CliError::Usage(format!("{text:?} is not a comma-separated point")))?;
    Ok(Vector::from_vec(values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use twistmap_core::map_algebra::vector;

    #[test]
    fn pairs_round_trip() {
        let rel = FiniteRelation::from_coords(&[(vec![0.0, 1.5], vec![2.0, -1.0]), (vec![3.0, 4.0], vec![0.1, 0.2])]);
        let text = format_pairs(&rel);
        assert!(text.starts_with("d0,d1,e0,e1\n"));
        assert_eq!(parse_pairs(&text).unwrap(), rel);
    }

    #[test]
    fn pairs_rejects_bad_input() {
        assert!(parse_pairs("d0,e0,x\n1,2,3\n").is_err());
        assert!(parse_pairs("d0,e1\n1,2\n").is_err());
        assert!(parse_pairs("d0,e0\n1,abc\n").is_err());
        assert!(parse_pairs("d0,e0\n1,2,3\n").is_err());
    }

    #[test]
    fn map_document_round_trip() {
        let map = TwistMap::translation(vector(&[0.25, -1.0 / 3.0])).with_note("test");
        let doc = MapDocument::from_map(&map, Some(1.0));
        let back = MapDocument::from_json(&doc.to_json()).unwrap();
        assert_eq!(back, doc);
        assert_eq!(back.to_map().unwrap(), map);
    }

    #[test]
    fn map_document_detects_tampering() {
        let map = TwistMap::translation(vector(&[1.0, 2.0]));
        let mut doc = MapDocument::from_map(&map, None);
        doc.offset = vec![1.0, 2.5];
        assert!(matches!(doc.to_map(), Err(CliError::Schema(_))));
        let mut doc = MapDocument::from_map(&map, None);
        doc.dimension = 3;
        assert!(matches!(doc.to_map(), Err(CliError::Schema(_))));
        assert!(MapDocument::from_json("{\"dimension\": 2}").is_err());
    }

    #[test]
    fn grid_axes() {
        let axes = parse_grid("0:1:3", 2).unwrap();
        assert_eq!(axes.len(), 2);
        assert_eq!(axes[0].point(2), 1.0);
        assert!(parse_grid("0:1", 1).is_err());
        assert!(parse_grid("0:1:2,0:1:2", 3).is_err());
        assert_eq!(parse_point("1, 2.5").unwrap(), vector(&[1.0, 2.5]));
    }
}
