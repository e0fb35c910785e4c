//! Finite sequences of positive rationals bounding level-set measures.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::str::FromStr;
use thiserror::Error;

pub type Rational = BigRational;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BudgetError {
    #[error("cannot parse rational {0:?}")]
    Parse(String),
    #[error("cannot represent {0} as a rational")]
    NotFinite(f64),
}

/// `Υ(0), …, Υ(m−1)`; only the entries with index `>= 3` are constrained.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Budget {
    pub values: Vec<Rational>,
}

impl Budget {
    pub fn new(values: Vec<Rational>) -> Self {
        Self { values }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// `m = dom(Υ)`.
    pub fn m(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, ell: usize) -> Option<&Rational> {
        self.values.get(ell)
    }

    /// `Σ { ℓ·Υ(ℓ) : 3 <= ℓ < m }`.
    pub fn weighted_sum(&self) -> Rational {
        self.values
            .iter()
            .enumerate()
            .skip(3)
            .fold(Rational::zero(), |acc, (ell, v)| acc + v * Rational::from_integer(BigInt::from(ell)))
    }

    /// Tail `Σ { ℓ·Υ(ℓ) : ℓ > k, 3 <= ℓ < m }`.
    pub fn weighted_tail(&self, k: usize) -> Rational {
        self.values
            .iter()
            .enumerate()
            .skip((k + 1).max(3))
            .fold(Rational::zero(), |acc, (ell, v)| acc + v * Rational::from_integer(BigInt::from(ell)))
    }

    pub fn all_positive(&self) -> bool {
        self.values.iter().all(|v| v.is_positive())
    }

    /// The bound `max(2, m − 1)` on determinants and slopes.
    pub fn det_cap(&self) -> usize {
        det_cap(self.m())
    }

    /// Extend with further entries.
    pub fn extended(&self, extra: impl IntoIterator<Item = Rational>) -> Self {
        let mut values = self.values.clone();
        values.extend(extra);
        Self { values }
    }

    /// True when `self` is an initial segment of `other`.
    pub fn is_prefix_of(&self, other: &Budget) -> bool {
        other.values.len() >= self.values.len() && other.values[..self.values.len()] == self.values[..]
    }
}

/// `max(2, m − 1)`.
pub fn det_cap(m: usize) -> usize {
    2usize.max(m.saturating_sub(1))
}

/// Integer as rational.
pub fn rat(n: i64) -> Rational {
    Rational::from_integer(BigInt::from(n))
}

/// `p/q` as rational.
pub fn ratio(p: i64, q: i64) -> Rational {
    Rational::new(BigInt::from(p), BigInt::from(q))
}

/// Exact rational value of a finite float.
pub fn rational_from_f64(x: f64) -> Result<Rational, BudgetError> {
    Rational::from_float(x).ok_or(BudgetError::NotFinite(x))
}

/// Nearest float to a rational.
pub fn rational_to_f64(r: &Rational) -> f64 {
    use num_traits::ToPrimitive;
    r.to_f64().unwrap_or(f64::NAN)
}

/// Largest rational with denominator `2^bits` not exceeding `x`.
pub fn rational_floor(x: f64, bits: u32) -> Result<Rational, BudgetError> {
    if !x.is_finite() {
        return Err(BudgetError::NotFinite(x));
    }
    let scale = 2f64.powi(bits as i32);
    let num = (x * scale).floor();
    let n = BigInt::from_str(&format!("{num:.0}")).map_err(|_| BudgetError::NotFinite(x))?;
    Ok(Rational::new(n, BigInt::from(2u64).pow(bits)))
}

/// Smallest rational with denominator `2^bits` not below `x`.
pub fn rational_ceil(x: f64, bits: u32) -> Result<Rational, BudgetError> {
    Ok(-rational_floor(-x, bits)?)
}

/// Render as `"p/q"` (or `"p"` when integral).
pub fn format_rational(r: &Rational) -> String {
    if r.denom().is_one() {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

/// Parse `"p/q"` or `"p"`.
pub fn parse_rational(s: &str) -> Result<Rational, BudgetError> {
    let s = s.trim();
    let parsed = match s.split_once('/') {
        Some((p, q)) => {
            let p = BigInt::from_str(p.trim()).map_err(|_| BudgetError::Parse(s.to_string()))?;
            let q = BigInt::from_str(q.trim()).map_err(|_| BudgetError::Parse(s.to_string()))?;
            if q.is_zero() {
                return Err(BudgetError::Parse(s.to_string()));
            }
            Rational::new(p, q)
        }
        None => Rational::from_integer(BigInt::from_str(s).map_err(|_| BudgetError::Parse(s.to_string()))?),
    };
    Ok(parsed)
}

/// Serde adapter storing rationals as `"p/q"` strings.
pub mod rational_string {
    use super::*;

    pub fn serialize<S: Serializer>(r: &Rational, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format_rational(r))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Rational, D::Error> {
        let s = String::deserialize(d)?;
        parse_rational(&s).map_err(serde::de::Error::custom)
    }
}

/// Serde adapter for optional rationals stored as `"p/q"` strings.
pub mod option_rational_string {
    use super::*;

    pub fn serialize<S: Serializer>(r: &Option<Rational>, s: S) -> Result<S::Ok, S::Error> {
        r.as_ref().map(format_rational).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Rational>, D::Error> {
        Option::<String>::deserialize(d)?
            .map(|s| parse_rational(&s).map_err(serde::de::Error::custom))
            .transpose()
    }
}

impl Serialize for Budget {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let strings: Vec<String> = self.values.iter().map(format_rational).collect();
        strings.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Budget {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let strings = Vec::<String>::deserialize(d)?;
        let values = strings
            .iter()
            .map(|s| parse_rational(s))
            .collect::<Result<Vec<_>, _>>()
            .map_err(serde::de::Error::custom)?;
        Ok(Budget { values })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sums_and_caps() {
        let b = Budget::new(vec![rat(1), rat(1), rat(1), ratio(1, 100), ratio(1, 50)]);
        assert_eq!(b.weighted_sum(), ratio(3, 100) + ratio(8, 100));
        assert_eq!(b.weighted_tail(3), ratio(8, 100));
        assert_eq!(b.weighted_tail(2), b.weighted_sum());
        assert_eq!(b.det_cap(), 4);
        assert_eq!(det_cap(0), 2);
    }

    #[test]
    fn string_round_trip() {
        for s in ["1/3", "-7/2", "5", "0"] {
            assert_eq!(format_rational(&parse_rational(s).unwrap()), s);
        }
        assert!(parse_rational("1/0").is_err());
        let b = Budget::new(vec![ratio(1, 3), rat(2)]);
        let json = serde_json_free(&b);
        assert_eq!(json, vec!["1/3".to_string(), "2".to_string()]);
    }

    fn serde_json_free(b: &Budget) -> Vec<String> {
        b.values.iter().map(format_rational).collect()
    }

    #[test]
    fn floor_and_ceil() {
        let f = rational_floor(0.1, 20).unwrap();
        let c = rational_ceil(0.1, 20).unwrap();
        assert!(rational_to_f64(&f) <= 0.1 && rational_to_f64(&c) >= 0.1);
        assert!(f < c);
    }
}
