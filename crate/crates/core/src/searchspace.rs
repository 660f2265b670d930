//! Search-space grammar: quantized-uniform and categorical parameters.
//!
//! The on-disk form is a JSON object mapping each parameter name to
//! `{"_type": "quniform" | "choice", "_value": [...]}`. Parsing accepts exactly
//! what [`SearchSpace::to_json_string`] emits, and key order is preserved.

use std::fmt;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};

use crate::error::{Error, Result};

/// A scalar hyperparameter value. Integers and reals stay distinct on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Float(f64),
    Str(String),
}

impl ParamValue {
    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            ParamValue::Int(i) => Some(i as f64),
            ParamValue::Float(f) => Some(f),
            ParamValue::Str(_) => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            ParamValue::Str(s) => Some(s),
            _ => None,
        }
    }

    fn from_json(value: &Value) -> Option<Self> {
        match value {
            Value::Number(n) => {
                if let Some(i) = n.as_i64() {
                    Some(ParamValue::Int(i))
                } else {
                    n.as_f64().filter(|f| f.is_finite()).map(ParamValue::Float)
                }
            }
            Value::String(s) => Some(ParamValue::Str(s.clone())),
            _ => None,
        }
    }

    pub fn to_json(&self) -> Value {
        match self {
            ParamValue::Int(i) => Value::from(*i),
            ParamValue::Float(f) => Number::from_f64(*f).map_or(Value::Null, Value::Number),
            ParamValue::Str(s) => Value::String(s.clone()),
        }
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Int(i) => write!(f, "{i}"),
            ParamValue::Float(x) => write!(f, "{x}"),
            ParamValue::Str(s) => f.write_str(s),
        }
    }
}

impl From<i64> for ParamValue {
    fn from(v: i64) -> Self {
        ParamValue::Int(v)
    }
}

impl From<f64> for ParamValue {
    fn from(v: f64) -> Self {
        ParamValue::Float(v)
    }
}

impl From<&str> for ParamValue {
    fn from(v: &str) -> Self {
        ParamValue::Str(v.to_owned())
    }
}

/// Domain of a single hyperparameter.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamSpec {
    /// `clip(round(u / q) * q, low, high)`. `integral` is set when all three
    /// bounds were integers, in which case samples are delivered as integers.
    QUniform {
        low: f64,
        high: f64,
        q: f64,
        integral: bool,
    },
    Choice {
        values: Vec<ParamValue>,
    },
}

impl ParamSpec {
    pub fn quniform(low: f64, high: f64, q: f64) -> Result<Self> {
        let integral = [low, high, q].iter().all(|v| v.fract() == 0.0);
        let spec = ParamSpec::QUniform { low, high, q, integral };
        spec.validate("<anonymous>")?;
        Ok(spec)
    }

    pub fn choice(values: Vec<ParamValue>) -> Result<Self> {
        let spec = ParamSpec::Choice { values };
        spec.validate("<anonymous>")?;
        Ok(spec)
    }

    fn validate(&self, key: &str) -> Result<()> {
        match self {
            ParamSpec::QUniform { low, high, q, .. } => {
                if !(low.is_finite() && high.is_finite() && q.is_finite()) {
                    return Err(Error::Schema(format!("`{key}`: bounds must be finite")));
                }
                if low > high {
                    return Err(Error::Schema(format!("`{key}`: low {low} > high {high}")));
                }
                if *q <= 0.0 {
                    return Err(Error::Schema(format!("`{key}`: step q must be positive")));
                }
            }
            ParamSpec::Choice { values } => {
                if values.is_empty() {
                    return Err(Error::Schema(format!("`{key}`: empty choice list")));
                }
                for (i, v) in values.iter().enumerate() {
                    if values[..i].contains(v) {
                        return Err(Error::Schema(format!("`{key}`: duplicate choice `{v}`")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Snap a real to the quantization grid and clip it to the bounds.
    /// Returns `None` for choice parameters.
    pub fn quantize(&self, x: f64) -> Option<ParamValue> {
        let ParamSpec::QUniform { low, high, q, integral } = *self else {
            return None;
        };
        let k = (x / q).round();
        let snapped = grid_point(k, q).clamp(low, high);
        Some(if integral {
            ParamValue::Int(snapped.round() as i64)
        } else {
            ParamValue::Float(snapped)
        })
    }

    /// Draw one value from the domain.
    ///
    /// Quantized draws take `u` uniform on `[low - q/2, high + q/2]` so that
    /// every grid point between the bounds owns a full-width rounding cell.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamValue {
        match self {
            ParamSpec::QUniform { low, high, q, .. } => {
                let u = rng.random_range((low - q / 2.0)..=(high + q / 2.0));
                self.quantize(u).expect("quniform")
            }
            ParamSpec::Choice { values } => values[rng.random_range(0..values.len())].clone(),
        }
    }

    pub fn contains(&self, value: &ParamValue) -> bool {
        match self {
            ParamSpec::QUniform {
                low, high, integral, ..
            } => match value {
                ParamValue::Int(i) => {
                    let x = *i as f64;
                    x >= *low && x <= *high
                }
                ParamValue::Float(x) => !integral && *x >= *low && *x <= *high,
                ParamValue::Str(_) => false,
            },
            ParamSpec::Choice { values } => values.contains(value),
        }
    }

    fn to_json(&self) -> Value {
        let mut entry = Map::new();
        match self {
            ParamSpec::QUniform { low, high, q, integral } => {
                let num = |v: f64| {
                    if *integral {
                        Value::from(v as i64)
                    } else {
                        Number::from_f64(v).map_or(Value::Null, Value::Number)
                    }
                };
                entry.insert("_type".into(), "quniform".into());
                entry.insert("_value".into(), Value::Array(vec![num(*low), num(*high), num(*q)]));
            }
            ParamSpec::Choice { values } => {
                entry.insert("_type".into(), "choice".into());
                entry.insert(
                    "_value".into(),
                    Value::Array(values.iter().map(ParamValue::to_json).collect()),
                );
            }
        }
        Value::Object(entry)
    }

    fn from_json(key: &str, value: &Value) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Schema(format!("`{key}`: expected an object")))?;
        let kind = obj
            .get("_type")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Schema(format!("`{key}`: missing string `_type`")))?;
        let items = obj
            .get("_value")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Schema(format!("`{key}`: missing array `_value`")))?;
        let spec = match kind {
            "quniform" => {
                if items.len() != 3 {
                    return Err(Error::Schema(format!(
                        "`{key}`: quniform expects [low, high, q], got {} values",
                        items.len()
                    )));
                }
                let mut nums = [0.0; 3];
                for (slot, item) in nums.iter_mut().zip(items) {
                    *slot = item
                        .as_f64()
                        .ok_or_else(|| Error::Schema(format!("`{key}`: non-numeric bound")))?;
                }
                ParamSpec::QUniform {
                    low: nums[0],
                    high: nums[1],
                    q: nums[2],
                    integral: items.iter().all(|v| v.is_i64() || v.is_u64()),
                }
            }
            "choice" => {
                let values = items
                    .iter()
                    .map(|v| {
                        ParamValue::from_json(v)
                            .ok_or_else(|| Error::Schema(format!("`{key}`: choices must be numbers or strings")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                ParamSpec::Choice { values }
            }
            other => {
                return Err(Error::UnsupportedParamKind {
                    key: key.to_owned(),
                    kind: other.to_owned(),
                })
            }
        };
        spec.validate(key)?;
        Ok(spec)
    }
}

// k·q, computed as k / (1/q) when 1/q is integral so decimal steps such as
// 0.05 land on the nearest representable decimal (0.15, not 0.15000000000000002).
fn grid_point(k: f64, q: f64) -> f64 {
    let inv = 1.0 / q;
    let inv_r = inv.round();
    if inv_r >= 1.0 && (inv - inv_r).abs() <= 1e-9 * inv_r {
        k / inv_r
    } else {
        k * q
    }
}

/// Ordered map of parameter name to domain.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SearchSpace {
    params: IndexMap<String, ParamSpec>,
}

impl SearchSpace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, spec: ParamSpec) -> Result<()> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::Schema("empty parameter name".into()));
        }
        if self.params.contains_key(&name) {
            return Err(Error::Schema(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, spec);
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        Self::from_json(&value)
    }

    pub fn from_json(value: &Value) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Schema("search space must be an object".into()))?;
        let mut space = SearchSpace::new();
        for (name, entry) in obj {
            space.insert(name.clone(), ParamSpec::from_json(name, entry)?)?;
        }
        Ok(space)
    }

    pub fn to_json(&self) -> Value {
        Value::Object(
            self.params
                .iter()
                .map(|(k, spec)| (k.clone(), spec.to_json()))
                .collect(),
        )
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_json()).expect("search space serializes")
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&ParamSpec> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamSpec)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// One independent draw per parameter, in declaration order.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamAssignment {
        ParamAssignment(
            self.params
                .iter()
                .map(|(k, spec)| (k.clone(), spec.sample(rng)))
                .collect(),
        )
    }

    /// Whether `assignment` has exactly this space's keys, each in domain.
    pub fn admits(&self, assignment: &ParamAssignment) -> bool {
        assignment.len() == self.len()
            && self
                .params
                .iter()
                .all(|(k, spec)| assignment.get(k).is_some_and(|v| spec.contains(v)))
    }
}

impl Serialize for SearchSpace {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_json().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for SearchSpace {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        SearchSpace::from_json(&value).map_err(serde::de::Error::custom)
    }
}

/// One concrete hyperparameter combination.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamAssignment(IndexMap<String, ParamValue>);

impl ParamAssignment {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, value: ParamValue) {
        self.0.insert(key.into(), value);
    }

    pub fn get(&self, key: &str) -> Option<&ParamValue> {
        self.0.get(key)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamValue)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn as_map(&self) -> &IndexMap<String, ParamValue> {
        &self.0
    }

    pub fn into_inner(self) -> IndexMap<String, ParamValue> {
        self.0
    }
}

impl From<IndexMap<String, ParamValue>> for ParamAssignment {
    fn from(map: IndexMap<String, ParamValue>) -> Self {
        Self(map)
    }
}

impl<K: Into<String>> FromIterator<(K, ParamValue)> for ParamAssignment {
    fn from_iter<I: IntoIterator<Item = (K, ParamValue)>>(iter: I) -> Self {
        Self(iter.into_iter().map(|(k, v)| (k.into(), v)).collect())
    }
}

impl fmt::Display for ParamAssignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, (k, v)) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{k}: {v}")?;
        }
        f.write_str("}")
    }
}

/// Defaults overridden by sampled values: every sampled key is removed from
/// the defaults, then the sampled entries are appended.
pub fn merge_params<V: Clone>(defaults: &IndexMap<String, V>, sampled: &IndexMap<String, V>) -> IndexMap<String, V> {
    let mut merged: IndexMap<String, V> = defaults
        .iter()
        .filter(|(k, _)| !sampled.contains_key(*k))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    merged.extend(sampled.iter().map(|(k, v)| (k.clone(), v.clone())));
    merged
}
