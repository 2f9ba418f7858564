//! Extended non-negative reals used for rate function values.

use std::fmt;
use std::ops::Add;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A value in `[0, +inf]`. Infinity is explicit and NaN is never stored.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct RateValue(f64);

impl RateValue {
    pub const ZERO: RateValue = RateValue(0.0);
    pub const INFINITY: RateValue = RateValue(f64::INFINITY);

    /// Wraps a non-negative value. Round-off negatives down to `-1e-9` are
    /// clamped to zero; anything lower is a logic error.
    pub fn new(v: f64) -> Self {
        assert!(!v.is_nan(), "rate value is NaN");
        debug_assert!(v >= -1e-9, "rate value {v} is negative");
        RateValue(v.max(0.0))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_finite(self) -> bool {
        self.0.is_finite()
    }

    pub fn is_infinite(self) -> bool {
        self.0.is_infinite()
    }

    pub fn min(self, other: RateValue) -> RateValue {
        if other.0 < self.0 {
            other
        } else {
            self
        }
    }

    pub fn scale(self, c: f64) -> RateValue {
        assert!(c >= 0.0);
        if self.is_infinite() {
            // 0 * inf is inf here: a zero weight never rescues an impossible event.
            return self;
        }
        RateValue::new(self.0 * c)
    }
}

impl Add for RateValue {
    type Output = RateValue;

    fn add(self, rhs: RateValue) -> RateValue {
        RateValue(self.0 + rhs.0)
    }
}

impl fmt::Display for RateValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_infinite() {
            f.write_str("inf")
        } else {
            write!(f, "{:.12e}", self.0)
        }
    }
}

impl Serialize for RateValue {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for RateValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct RateVisitor;

        impl Visitor<'_> for RateVisitor {
            type Value = RateValue;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a non-negative number or \"inf\"")
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<RateValue, E> {
                if v.is_nan() || v < 0.0 {
                    return Err(E::custom("rate value must be non-negative"));
                }
                Ok(RateValue(v))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<RateValue, E> {
                Ok(RateValue(v as f64))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<RateValue, E> {
                self.visit_f64(v as f64)
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<RateValue, E> {
                match v {
                    "inf" | "Infinity" | "+inf" => Ok(RateValue::INFINITY),
                    _ => Err(E::custom(format!("unexpected rate value `{v}`"))),
                }
            }
        }

        d.deserialize_any(RateVisitor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infinity_roundtrips_through_json() {
        let s = serde_json::to_string(&RateValue::INFINITY).unwrap();
        assert_eq!(s, "\"inf\"");
        let back: RateValue = serde_json::from_str(&s).unwrap();
        assert!(back.is_infinite());
        let v: RateValue = serde_json::from_str("0.5").unwrap();
        assert_eq!(v.value(), 0.5);
    }

    #[test]
    fn roundoff_negatives_clamp_to_zero() {
        assert_eq!(RateValue::new(-1e-15), RateValue::ZERO);
    }

    #[test]
    fn scaling_keeps_infinity() {
        assert!(RateValue::INFINITY.scale(0.0).is_infinite());
        assert_eq!(RateValue::new(2.0).scale(0.5).value(), 1.0);
    }
}
