//! Exact edge weights and extended distances.
//!
//! All weights are arbitrary-precision rationals so that guard evaluation and
//! checker comparisons are exact and deterministic. [`Dist`] extends weights
//! with an infinity that is absorbing under addition and maximal in the order.

use std::cmp::Ordering;
use std::fmt;
use std::iter::Sum;
use std::ops::Add;
use std::str::FromStr;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

/// A finite rational weight.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Weight(BigRational);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WeightParseError {
    #[error("empty weight")]
    Empty,
    #[error("invalid weight `{0}`")]
    Invalid(String),
    #[error("zero denominator in `{0}`")]
    ZeroDenominator(String),
}

impl Weight {
    pub fn zero() -> Self {
        Weight(BigRational::zero())
    }

    pub fn from_int(n: i64) -> Self {
        Weight(BigRational::from_integer(BigInt::from(n)))
    }

    /// Builds `num/den`. Panics when `den` is zero.
    pub fn new(num: i64, den: i64) -> Self {
        assert!(den != 0, "zero denominator");
        Weight(BigRational::new(BigInt::from(num), BigInt::from(den)))
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }

    pub fn is_positive(&self) -> bool {
        self.0.is_positive()
    }

    pub fn as_rational(&self) -> &BigRational {
        &self.0
    }

    /// `self <= factor * other`, exactly.
    pub fn within_factor(&self, factor: u32, other: &Weight) -> bool {
        self.0 <= &other.0 * BigInt::from(factor)
    }

    /// `self / other` as a rational; `None` when `other` is zero.
    pub fn ratio_to(&self, other: &Weight) -> Option<Weight> {
        if other.0.is_zero() {
            None
        } else {
            Some(Weight(&self.0 / &other.0))
        }
    }
}

impl Add<&Weight> for &Weight {
    type Output = Weight;
    fn add(self, rhs: &Weight) -> Weight {
        Weight(&self.0 + &rhs.0)
    }
}

impl Add for Weight {
    type Output = Weight;
    fn add(self, rhs: Weight) -> Weight {
        Weight(self.0 + rhs.0)
    }
}

impl<'a> Sum<&'a Weight> for Weight {
    fn sum<I: Iterator<Item = &'a Weight>>(iter: I) -> Weight {
        iter.fold(Weight::zero(), |acc, w| &acc + w)
    }
}

impl fmt::Display for Weight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.denom().is_one() {
            write!(f, "{}", self.0.numer())
        } else {
            write!(f, "{}/{}", self.0.numer(), self.0.denom())
        }
    }
}

impl fmt::Debug for Weight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// Accepts `7`, `-3/2` and decimal forms such as `1.5`.
impl FromStr for Weight {
    type Err = WeightParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() {
            return Err(WeightParseError::Empty);
        }
        let invalid = || WeightParseError::Invalid(s.to_string());
        if let Some((num, den)) = s.split_once('/') {
            let num: BigInt = num.trim().parse().map_err(|_| invalid())?;
            let den: BigInt = den.trim().parse().map_err(|_| invalid())?;
            if den.is_zero() {
                return Err(WeightParseError::ZeroDenominator(s.to_string()));
            }
            return Ok(Weight(BigRational::new(num, den)));
        }
        if let Some((int, frac)) = s.split_once('.') {
            if frac.is_empty() || !frac.bytes().all(|b| b.is_ascii_digit()) {
                return Err(invalid());
            }
            let negative = int.trim_start().starts_with('-');
            let int: BigInt = if int == "-" || int.is_empty() {
                BigInt::zero()
            } else {
                int.parse().map_err(|_| invalid())?
            };
            let scale = BigInt::from(10u32).pow(frac.len() as u32);
            let frac_num: BigInt = frac.parse().map_err(|_| invalid())?;
            let signed_frac = if negative { -frac_num } else { frac_num };
            return Ok(Weight(BigRational::new(int * &scale + signed_frac, scale)));
        }
        let n: BigInt = s.parse().map_err(|_| invalid())?;
        Ok(Weight(BigRational::from_integer(n)))
    }
}

impl Serialize for Weight {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Weight {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        deserializer.deserialize_any(WeightVisitor)
    }
}

struct WeightVisitor;

impl Visitor<'_> for WeightVisitor {
    type Value = Weight;

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("a rational weight as string or integer")
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<Weight, E> {
        v.parse().map_err(de::Error::custom)
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<Weight, E> {
        Ok(Weight::from_int(v))
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<Weight, E> {
        Ok(Weight(BigRational::from_integer(BigInt::from(v))))
    }
}

/// A weight extended with `+inf`: absorbing in addition, maximal in order.
#[derive(Clone, PartialEq, Eq, Hash)]
pub enum Dist {
    Finite(Weight),
    Infinite,
}

impl Dist {
    pub fn zero() -> Self {
        Dist::Finite(Weight::zero())
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, Dist::Infinite)
    }

    pub fn finite(&self) -> Option<&Weight> {
        match self {
            Dist::Finite(w) => Some(w),
            Dist::Infinite => None,
        }
    }

    pub fn plus(&self, w: &Weight) -> Dist {
        match self {
            Dist::Finite(d) => Dist::Finite(d + w),
            Dist::Infinite => Dist::Infinite,
        }
    }
}

impl From<Weight> for Dist {
    fn from(w: Weight) -> Self {
        Dist::Finite(w)
    }
}

impl PartialOrd for Dist {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Dist {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Dist::Finite(a), Dist::Finite(b)) => a.cmp(b),
            (Dist::Finite(_), Dist::Infinite) => Ordering::Less,
            (Dist::Infinite, Dist::Finite(_)) => Ordering::Greater,
            (Dist::Infinite, Dist::Infinite) => Ordering::Equal,
        }
    }
}

impl fmt::Display for Dist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dist::Finite(w) => w.fmt(f),
            Dist::Infinite => f.write_str("inf"),
        }
    }
}

impl fmt::Debug for Dist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for Dist {
    type Err = WeightParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        if t == "inf" || t == "+inf" {
            Ok(Dist::Infinite)
        } else {
            Ok(Dist::Finite(t.parse()?))
        }
    }
}

impl Serialize for Dist {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Dist {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(de::Error::custom)
    }
}
