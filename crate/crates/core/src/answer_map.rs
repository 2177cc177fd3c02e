//! Serde adapter for `BTreeMap<Answer, V>`: JSON object keys must be
//! strings, so answers are keyed by their display form, e.g. `"[3]"` or
//! `"[1,4]"`.

use std::collections::BTreeMap;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::policy::{Answer, Token};

pub fn serialize<S, V>(map: &BTreeMap<Answer, V>, serializer: S) -> Result<S::Ok, S::Error>
where
    S: Serializer,
    V: Serialize,
{
    serializer.collect_map(map.iter().map(|(k, v)| (k.to_string(), v)))
}

pub fn deserialize<'de, D, V>(deserializer: D) -> Result<BTreeMap<Answer, V>, D::Error>
where
    D: Deserializer<'de>,
    V: Deserialize<'de>,
{
    let raw = BTreeMap::<String, V>::deserialize(deserializer)?;
    raw.into_iter()
        .map(|(k, v)| parse_answer(&k).map(|a| (a, v)).map_err(D::Error::custom))
        .collect()
}

pub fn parse_answer(s: &str) -> Result<Answer, String> {
    let inner = s
        .trim()
        .strip_prefix('[')
        .and_then(|r| r.strip_suffix(']'))
        .ok_or_else(|| format!("answer key {s:?} must look like [t1,t2,...]"))?;
    if inner.trim().is_empty() {
        return Err(format!("answer key {s:?} is empty"));
    }
    inner
        .split(',')
        .map(|t| t.trim().parse::<Token>().map_err(|e| format!("answer key {s:?}: {e}")))
        .collect::<Result<Vec<_>, _>>()
        .map(Answer)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Wrap {
        #[serde(with = "super")]
        m: BTreeMap<Answer, f64>,
    }

    #[test]
    fn round_trip() {
        let w = Wrap {
            m: [(Answer(vec![3]), 0.5), (Answer(vec![1, 4]), 0.25)]
                .into_iter()
                .collect(),
        };
        let json = serde_json::to_string(&w).unwrap();
        assert_eq!(json, r#"{"m":{"[1,4]":0.25,"[3]":0.5}}"#);
        assert_eq!(serde_json::from_str::<Wrap>(&json).unwrap(), w);
        assert!(parse_answer("3").is_err());
        assert!(parse_answer("[]").is_err());
    }
}
