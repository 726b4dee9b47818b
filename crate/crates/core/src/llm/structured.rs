//! Pulls the first JSON value out of free-form model output and checks it
//! against the shape each role expects.

use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemaKind {
    /// `{"weights": [pred, key, vis]}`
    Weights,
    /// `{"pairs": [{"object": .., "attribute": ..}], "declarative": ..}`
    ConstraintPairs,
    /// `{"selected": [ids], "next_page": bool, "rationale": ..}`
    PageDecision,
    /// `{"heuristics": [..]}`
    Heuristics,
    /// `{"score": x}`
    Score,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Structured {
    Weights([f64; 3]),
    Constraints {
        pairs: Vec<(String, String)>,
        declarative: Option<String>,
    },
    Decision {
        selected: Vec<String>,
        next_page: bool,
        rationale: String,
    },
    Heuristics(Vec<String>),
    Score(f64),
}

#[derive(Debug, Clone, Error, PartialEq)]
#[error("malformed structured reply ({reason})")]
pub struct MalformedStructuredReply {
    /// Verbatim model output, kept for building the re-prompt.
    pub raw: String,
    pub reason: String,
}

/// First parseable JSON object or array in `text`, skipping code fences and prose.
pub fn extract_first_json(text: &str) -> Option<Value> {
    for (i, c) in text.char_indices() {
        if c != '{' && c != '[' {
            continue;
        }
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
        if let Some(Ok(value)) = stream.next() {
            return Some(value);
        }
    }
    None
}

pub fn parse_structured(text: &str, kind: SchemaKind) -> Result<Structured, MalformedStructuredReply> {
    let malformed = |reason: &str| MalformedStructuredReply {
        raw: text.to_string(),
        reason: reason.to_string(),
    };
    let value = extract_first_json(text).ok_or_else(|| malformed("no JSON object or array found"))?;
    let parsed = match kind {
        SchemaKind::Weights => weights(&value).map(Structured::Weights),
        SchemaKind::ConstraintPairs => constraints(&value),
        SchemaKind::PageDecision => decision(&value),
        SchemaKind::Heuristics => heuristics(&value).map(Structured::Heuristics),
        SchemaKind::Score => score(&value).map(Structured::Score),
    };
    parsed.map_err(|reason| malformed(&reason))
}

fn finite(v: &Value) -> Result<f64, String> {
    v.as_f64()
        .filter(|x| x.is_finite())
        .ok_or_else(|| format!("expected a finite number, got {v}"))
}

fn weights(value: &Value) -> Result<[f64; 3], String> {
    let triple = |arr: &Vec<Value>| -> Result<[f64; 3], String> {
        if arr.len() != 3 {
            return Err(format!("expected 3 weights, got {}", arr.len()));
        }
        Ok([finite(&arr[0])?, finite(&arr[1])?, finite(&arr[2])?])
    };
    match value {
        Value::Array(arr) => triple(arr),
        Value::Object(map) => {
            if let Some(Value::Array(arr)) = map.get("weights") {
                return triple(arr);
            }
            let named = ["pred", "key", "vis"].map(|k| map.get(k));
            if let [Some(p), Some(k), Some(v)] = named {
                return Ok([finite(p)?, finite(k)?, finite(v)?]);
            }
            Err("missing \"weights\" array".into())
        }
        _ => Err("weights must be an array or object".into()),
    }
}

fn constraints(value: &Value) -> Result<Structured, String> {
    let (list, declarative) = match value {
        Value::Array(arr) => (arr, None),
        Value::Object(map) => {
            let list = map
                .get("pairs")
                .or_else(|| map.get("constraints"))
                .and_then(Value::as_array)
                .ok_or("missing \"pairs\" array")?;
            let declarative = map
                .get("declarative")
                .and_then(Value::as_str)
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from);
            (list, declarative)
        }
        _ => return Err("constraints must be an array or object".into()),
    };
    let mut pairs = Vec::with_capacity(list.len());
    for item in list {
        let (object, attribute) = match item {
            Value::String(o) => (o.clone(), String::new()),
            Value::Array(parts) => {
                let o = parts.first().and_then(Value::as_str).ok_or("pair without object")?;
                let a = parts.get(1).and_then(Value::as_str).unwrap_or("");
                (o.to_string(), a.to_string())
            }
            Value::Object(map) => {
                let o = map
                    .get("object")
                    .and_then(Value::as_str)
                    .ok_or("pair without \"object\"")?;
                let a = map.get("attribute").and_then(Value::as_str).unwrap_or("");
                (o.to_string(), a.to_string())
            }
            _ => return Err(format!("unexpected pair {item}")),
        };
        pairs.push((object.trim().to_string(), attribute.trim().to_string()));
    }
    Ok(Structured::Constraints { pairs, declarative })
}

fn decision(value: &Value) -> Result<Structured, String> {
    let map = value.as_object().ok_or("page decision must be an object")?;
    let mut selected = Vec::new();
    let mut next_page = map.get("next_page").and_then(Value::as_bool).unwrap_or(false);
    match map.get("selected").or_else(|| map.get("answer")) {
        None | Some(Value::Null) => {}
        Some(Value::String(s)) => selected.push(s.clone()),
        Some(Value::Array(items)) => {
            for item in items {
                match item {
                    Value::String(s) => selected.push(s.clone()),
                    Value::Number(n) => selected.push(n.to_string()),
                    other => return Err(format!("unexpected selected entry {other}")),
                }
            }
        }
        Some(other) => return Err(format!("unexpected \"selected\" value {other}")),
    }
    if !map.contains_key("selected") && !map.contains_key("answer") && !map.contains_key("next_page") {
        return Err("neither \"selected\" nor \"next_page\" present".into());
    }
    selected.retain(|s| {
        if s.eq_ignore_ascii_case("next_page") {
            next_page = true;
            false
        } else {
            true
        }
    });
    let rationale = ["rationale", "think", "reason"]
        .iter()
        .find_map(|k| map.get(*k).and_then(Value::as_str))
        .unwrap_or("")
        .to_string();
    Ok(Structured::Decision {
        selected,
        next_page,
        rationale,
    })
}

fn heuristics(value: &Value) -> Result<Vec<String>, String> {
    let list = match value {
        Value::Array(arr) => arr,
        Value::Object(map) => map
            .get("heuristics")
            .or_else(|| map.get("experiences"))
            .and_then(Value::as_array)
            .ok_or("missing \"heuristics\" array")?,
        _ => return Err("heuristics must be an array or object".into()),
    };
    list.iter()
        .map(|v| {
            v.as_str()
                .map(|s| s.trim().to_string())
                .ok_or_else(|| format!("non-string heuristic {v}"))
        })
        .collect()
}

fn score(value: &Value) -> Result<f64, String> {
    match value {
        Value::Object(map) => finite(map.get("score").ok_or("missing \"score\"")?),
        Value::Array(arr) if arr.len() == 1 => finite(&arr[0]),
        _ => Err("score must be an object".into()),
    }
}
