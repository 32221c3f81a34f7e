//! Serde helpers for metrics that may be infinite.
//!
//! JSON has no literal for infinity, so possibly-infinite scores serialize as
//! the string `"inf"` (or `"-inf"`/`"nan"`) and as plain numbers otherwise.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum NumOrStr {
    Num(f64),
    Str(String),
}

fn encode(v: f64) -> NumOrStr {
    if v.is_finite() {
        NumOrStr::Num(v)
    } else if v.is_nan() {
        NumOrStr::Str("nan".to_string())
    } else if v > 0.0 {
        NumOrStr::Str("inf".to_string())
    } else {
        NumOrStr::Str("-inf".to_string())
    }
}

fn decode<E: serde::de::Error>(raw: NumOrStr) -> Result<f64, E> {
    match raw {
        NumOrStr::Num(v) => Ok(v),
        NumOrStr::Str(s) => match s.as_str() {
            "inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            "nan" => Ok(f64::NAN),
            other => Err(E::custom(format!("expected a number or inf/nan, got `{other}`"))),
        },
    }
}

pub mod inf_f64 {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        encode(*v).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        decode(NumOrStr::deserialize(d)?)
    }
}

pub mod inf_f64_vec {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let enc: Vec<NumOrStr> = v.iter().map(|x| encode(*x)).collect();
        enc.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<NumOrStr>::deserialize(d)?
            .into_iter()
            .map(decode::<D::Error>)
            .collect()
    }
}
