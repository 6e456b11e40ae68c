//! `Option` fields written as the value or the string `"none"`, so that a
//! disabled setting survives formats without null (TOML) and is not
//! replaced by a non-`None` default on reload.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Repr<T> {
    Some(T),
    Tag(String),
}

pub fn serialize<T: Serialize, S: Serializer>(v: &Option<T>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(x) => x.serialize(s),
        None => s.serialize_str("none"),
    }
}

pub fn deserialize<'de, T: Deserialize<'de>, D: Deserializer<'de>>(d: D) -> Result<Option<T>, D::Error> {
    match Repr::<T>::deserialize(d)? {
        Repr::Some(x) => Ok(Some(x)),
        Repr::Tag(t) if t == "none" => Ok(None),
        Repr::Tag(t) => Err(serde::de::Error::custom(format!("expected a value or \"none\", got {t:?}"))),
    }
}
