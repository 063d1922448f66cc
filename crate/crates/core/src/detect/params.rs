use std::cmp::Ordering;
use std::fmt;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::DetectError;

/// Binarization threshold: a fixed intensity or Otsu's method per input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Threshold {
    Otsu,
    Value(u8),
}

impl Ord for Threshold {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Threshold::Otsu, Threshold::Otsu) => Ordering::Equal,
            (Threshold::Otsu, Threshold::Value(_)) => Ordering::Less,
            (Threshold::Value(_), Threshold::Otsu) => Ordering::Greater,
            (Threshold::Value(a), Threshold::Value(b)) => a.cmp(b),
        }
    }
}

impl PartialOrd for Threshold {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Serialize for Threshold {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Threshold::Otsu => s.serialize_str("otsu"),
            Threshold::Value(v) => s.serialize_u8(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Threshold {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = Threshold;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("an intensity 0-255 or \"otsu\"")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Threshold, E> {
                u8::try_from(v)
                    .map(Threshold::Value)
                    .map_err(|_| E::custom(format!("threshold {v} outside 0-255")))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Threshold, E> {
                u64::try_from(v)
                    .map_err(|_| E::custom(format!("threshold {v} outside 0-255")))
                    .and_then(|v| self.visit_u64(v))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Threshold, E> {
                if v == "otsu" {
                    Ok(Threshold::Otsu)
                } else {
                    Err(E::custom(format!("unknown threshold {v:?}")))
                }
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    /// Foreground is `value > threshold`.
    BrightObjects,
    /// Foreground is `value <= threshold`.
    DarkObjects,
}

/// Reference detector configuration. Models in the registry are these
/// records, stored fully materialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorParams {
    pub threshold: Threshold,
    pub polarity: Polarity,
    pub open_radius: u32,
    pub min_area: u64,
    /// `None` means unbounded.
    pub max_area: Option<u64>,
    pub simplify_epsilon: f64,
}

/// Upper limit for structuring element radii.
pub const MAX_OPEN_RADIUS: u32 = 32;

impl DetectorParams {
    /// Generic shelter detector: the root of the structures hierarchy.
    pub fn generic_structures() -> Self {
        Self {
            threshold: Threshold::Value(150),
            polarity: Polarity::BrightObjects,
            open_radius: 1,
            min_area: 40,
            max_area: Some(5000),
            simplify_epsilon: 0.5,
        }
    }

    /// Generic water mapper: dark objects, no area ceiling.
    pub fn generic_flood() -> Self {
        Self {
            threshold: Threshold::Value(90),
            polarity: Polarity::DarkObjects,
            open_radius: 1,
            min_area: 50,
            max_area: None,
            simplify_epsilon: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), DetectError> {
        if let Some(max) = self.max_area {
            if self.min_area > max {
                return Err(DetectError::InvalidParams(format!(
                    "min_area {} exceeds max_area {max}",
                    self.min_area
                )));
            }
        }
        if !(self.simplify_epsilon.is_finite() && self.simplify_epsilon >= 0.0) {
            return Err(DetectError::InvalidParams("simplify_epsilon must be finite and >= 0".into()));
        }
        if self.open_radius > MAX_OPEN_RADIUS {
            return Err(DetectError::InvalidParams(format!(
                "open_radius {} exceeds {MAX_OPEN_RADIUS}",
                self.open_radius
            )));
        }
        Ok(())
    }

    pub fn area_in_bounds(&self, area: u64) -> bool {
        area >= self.min_area && self.max_area.is_none_or(|m| area <= m)
    }
}
