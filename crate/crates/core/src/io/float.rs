//! Serde adapters that keep non-finite floats through JSON, which has no
//! literal for them. Finite values stay plain numbers; the rest become the
//! strings `"inf"`, `"-inf"` and `"nan"`. `null` reads back as NaN.

use serde::de::{self, Deserializer, Visitor};
use serde::ser::{SerializeSeq, Serializer};
use serde::Deserialize;

#[derive(Clone, Copy)]
struct Lossless(f64);

impl serde::Serialize for Lossless {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let v = self.0;
        if v.is_finite() {
            s.serialize_f64(v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }
}

struct LosslessVisitor;

impl<'de> Visitor<'de> for LosslessVisitor {
    type Value = f64;

    fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
        f.write_str("a number, null, or one of \"inf\", \"-inf\", \"nan\"")
    }

    fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
        Ok(v)
    }

    fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
        Ok(v as f64)
    }

    fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
        Ok(v as f64)
    }

    fn visit_unit<E: de::Error>(self) -> Result<f64, E> {
        Ok(f64::NAN)
    }

    fn visit_none<E: de::Error>(self) -> Result<f64, E> {
        Ok(f64::NAN)
    }

    fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
        match v {
            "inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            "nan" => Ok(f64::NAN),
            other => Err(E::invalid_value(de::Unexpected::Str(other), &self)),
        }
    }
}

impl<'de> Deserialize<'de> for Lossless {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        d.deserialize_any(LosslessVisitor).map(Lossless)
    }
}

/// For `f64` fields: `#[serde(with = "crate::io::float::scalar")]`.
pub mod scalar {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        serde::Serialize::serialize(&Lossless(*v), s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Lossless::deserialize(d).map(|l| l.0)
    }
}

/// For `Vec<f64>` fields: `#[serde(with = "crate::io::float::vec")]`.
pub mod vec {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(v.len()))?;
        for x in v {
            seq.serialize_element(&Lossless(*x))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let raw: Vec<Lossless> = Vec::deserialize(d)?;
        Ok(raw.into_iter().map(|l| l.0).collect())
    }
}

#[cfg(test)]
mod tests {
    use serde::{Deserialize, Serialize};

    #[derive(Debug, Serialize, Deserialize)]
    struct Holder {
        #[serde(with = "super::scalar")]
        x: f64,
        #[serde(with = "super::vec")]
        v: Vec<f64>,
    }

    #[test]
    fn non_finite_values_round_trip() {
        let h = Holder {
            x: f64::NEG_INFINITY,
            v: vec![1.5, f64::INFINITY, f64::NAN, -0.25, f64::NEG_INFINITY],
        };
        let text = serde_json::to_string(&h).unwrap();
        let back: Holder = serde_json::from_str(&text).unwrap();
        assert_eq!(back.x, f64::NEG_INFINITY);
        assert_eq!(back.v[0], 1.5);
        assert_eq!(back.v[1], f64::INFINITY);
        assert!(back.v[2].is_nan());
        assert_eq!(back.v[3], -0.25);
        assert_eq!(back.v[4], f64::NEG_INFINITY);
    }

    #[test]
    fn finite_values_stay_numbers() {
        let h = Holder { x: 2.0, v: vec![0.1] };
        assert_eq!(serde_json::to_string(&h).unwrap(), r#"{"x":2.0,"v":[0.1]}"#);
    }

    #[test]
    fn null_reads_as_nan() {
        let h: Holder = serde_json::from_str(r#"{"x":null,"v":[null,3]}"#).unwrap();
        assert!(h.x.is_nan() && h.v[0].is_nan());
        assert_eq!(h.v[1], 3.0);
    }

    #[test]
    fn unknown_strings_are_rejected() {
        assert!(serde_json::from_str::<Holder>(r#"{"x":"big","v":[]}"#).is_err());
    }
}
