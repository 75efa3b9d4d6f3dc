//! Attribute values, provenance chains, proposals and per-attribute state.
//!
//! Everything here is plain data: immutable once built, cheap to clone and
//! safe to share across threads. Survival arithmetic lives here as well since
//! both the fusion layer and the cohort backbone need it.

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, Utc};
use indexmap::IndexSet;
use serde::{Deserialize, Serialize};

/// Absolute tolerance for every equality and monotonicity check.
pub const TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ValueError {
    #[error("type mismatch: expected {expected}, found {found}")]
    TypeMismatch { expected: String, found: String },
    #[error("value {value} outside plausible range [{min}, {max}]")]
    OutOfPlausibleRange { value: f64, min: f64, max: f64 },
    #[error("label {label:?} not in declared label set")]
    UnknownLabel { label: String },
    #[error("malformed value: {0}")]
    Malformed(String),
    #[error("malformed survival curve: horizons not strictly increasing at index {0}")]
    MalformedCurve(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignatureKind {
    BaseModel,
    Fusion,
}

/// Identity stamped onto a provenance chain by a base model or a fusion node.
///
/// Serialized as `"model:<id>"` or `"fusion:<id>"`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct Signature {
    pub kind: SignatureKind,
    pub id: String,
}

impl Signature {
    pub fn model(id: impl Into<String>) -> Self {
        Self { kind: SignatureKind::BaseModel, id: id.into() }
    }

    pub fn fusion(id: impl Into<String>) -> Self {
        Self { kind: SignatureKind::Fusion, id: id.into() }
    }

    pub fn is_fusion(&self) -> bool {
        self.kind == SignatureKind::Fusion
    }
}

impl fmt::Display for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            SignatureKind::BaseModel => write!(f, "model:{}", self.id),
            SignatureKind::Fusion => write!(f, "fusion:{}", self.id),
        }
    }
}

impl From<Signature> for String {
    fn from(sig: Signature) -> Self {
        sig.to_string()
    }
}

impl TryFrom<String> for Signature {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        let (kind, id) = s.split_once(':').ok_or_else(|| format!("bad signature {s:?}"))?;
        if id.is_empty() {
            return Err(format!("empty signature id in {s:?}"));
        }
        match kind {
            "model" => Ok(Signature::model(id)),
            "fusion" => Ok(Signature::fusion(id)),
            _ => Err(format!("unknown signature kind in {s:?}")),
        }
    }
}

/// Insertion-ordered, duplicate-free set of signatures.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProvenanceChain(IndexSet<Signature>);

impl ProvenanceChain {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn single(sig: Signature) -> Self {
        let mut chain = Self::new();
        chain.push(sig);
        chain
    }

    /// Appends `sig` unless already present. Returns whether it was new.
    pub fn push(&mut self, sig: Signature) -> bool {
        self.0.insert(sig)
    }

    pub fn contains(&self, sig: &Signature) -> bool {
        self.0.contains(sig)
    }

    /// Left operand order first, then unseen entries of `other`.
    pub fn union(&self, other: &ProvenanceChain) -> ProvenanceChain {
        let mut out = self.clone();
        out.extend_from(other);
        out
    }

    pub fn extend_from(&mut self, other: &ProvenanceChain) {
        for sig in other.iter() {
            self.0.insert(sig.clone());
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Signature> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Same entries regardless of order.
    pub fn same_set(&self, other: &ProvenanceChain) -> bool {
        self.len() == other.len() && self.iter().all(|s| other.contains(s))
    }

    pub fn base_models(&self) -> impl Iterator<Item = &str> {
        self.iter().filter(|s| !s.is_fusion()).map(|s| s.id.as_str())
    }

    pub fn fusions(&self) -> impl Iterator<Item = &str> {
        self.iter().filter(|s| s.is_fusion()).map(|s| s.id.as_str())
    }
}

impl FromIterator<Signature> for ProvenanceChain {
    fn from_iter<I: IntoIterator<Item = Signature>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

pub fn provenance_union(a: &ProvenanceChain, b: &ProvenanceChain) -> ProvenanceChain {
    a.union(b)
}

pub fn provenance_contains(chain: &ProvenanceChain, sig: &Signature) -> bool {
    chain.contains(sig)
}

/// Variant tag of [`Value`], used by descriptors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Continuous,
    Probability,
    Categorical,
    Boolean,
    SurvivalCurve,
    TimeToEventDensity,
}

impl fmt::Display for ValueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ValueKind::Continuous => "continuous",
            ValueKind::Probability => "probability",
            ValueKind::Categorical => "categorical",
            ValueKind::Boolean => "boolean",
            ValueKind::SurvivalCurve => "survival_curve",
            ValueKind::TimeToEventDensity => "time_to_event_density",
        };
        f.write_str(s)
    }
}

/// A tagged attribute value.
///
/// JSON form: `{"kind":"probability","value":0.3}`,
/// `{"kind":"categorical","probs":{"low":0.6,"high":0.4}}`,
/// `{"kind":"survival_curve","points":[[180,0.7],[365,0.5]]}` and so on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Value {
    Continuous {
        value: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stddev: Option<f64>,
    },
    Probability {
        value: f64,
    },
    Categorical {
        probs: BTreeMap<String, f64>,
    },
    Boolean {
        value: bool,
    },
    SurvivalCurve {
        points: Vec<(u32, f64)>,
    },
    TimeToEventDensity {
        masses: Vec<(u32, f64)>,
    },
}

impl Value {
    pub fn continuous(value: f64) -> Self {
        Value::Continuous { value, stddev: None }
    }

    pub fn probability(value: f64) -> Self {
        Value::Probability { value }
    }

    pub fn boolean(value: bool) -> Self {
        Value::Boolean { value }
    }

    /// One-hot categorical over `labels` with all mass on `label`.
    pub fn label<'a>(label: &str, labels: impl IntoIterator<Item = &'a str>) -> Self {
        let mut probs: BTreeMap<String, f64> =
            labels.into_iter().map(|l| (l.to_string(), 0.0)).collect();
        probs.insert(label.to_string(), 1.0);
        Value::Categorical { probs }
    }

    pub fn curve(points: Vec<(u32, f64)>) -> Self {
        Value::SurvivalCurve { points }
    }

    pub fn density(masses: Vec<(u32, f64)>) -> Self {
        Value::TimeToEventDensity { masses }
    }

    pub fn kind(&self) -> ValueKind {
        match self {
            Value::Continuous { .. } => ValueKind::Continuous,
            Value::Probability { .. } => ValueKind::Probability,
            Value::Categorical { .. } => ValueKind::Categorical,
            Value::Boolean { .. } => ValueKind::Boolean,
            Value::SurvivalCurve { .. } => ValueKind::SurvivalCurve,
            Value::TimeToEventDensity { .. } => ValueKind::TimeToEventDensity,
        }
    }

    /// Scalar reading for numeric variants.
    pub fn as_number(&self) -> Option<f64> {
        match self {
            Value::Continuous { value, .. } | Value::Probability { value } => Some(*value),
            _ => None,
        }
    }

    /// Most probable label; ties resolve to the lexicographically first label.
    pub fn argmax_label(&self) -> Option<&str> {
        match self {
            Value::Categorical { probs } => {
                let mut best: Option<(&str, f64)> = None;
                for (label, p) in probs {
                    if best.is_none_or(|(_, bp)| *p > bp + TOLERANCE) {
                        best = Some((label.as_str(), *p));
                    }
                }
                best.map(|(l, _)| l)
            }
            _ => None,
        }
    }

    /// Checks the variant's own structural invariants.
    pub fn validate(&self) -> Result<(), ValueError> {
        match self {
            Value::Continuous { value, stddev } => {
                if !value.is_finite() {
                    return Err(ValueError::Malformed("non-finite continuous value".into()));
                }
                if let Some(sd) = stddev {
                    if !sd.is_finite() || *sd < 0.0 {
                        return Err(ValueError::Malformed("stddev must be finite and >= 0".into()));
                    }
                }
                Ok(())
            }
            Value::Probability { value } => {
                if !(0.0..=1.0).contains(value) {
                    return Err(ValueError::Malformed(format!("probability {value} outside [0,1]")));
                }
                Ok(())
            }
            Value::Categorical { probs } => {
                if probs.is_empty() {
                    return Err(ValueError::Malformed("empty categorical".into()));
                }
                if probs.values().any(|p| !(0.0..=1.0).contains(p)) {
                    return Err(ValueError::Malformed("categorical probability outside [0,1]".into()));
                }
                let sum: f64 = probs.values().sum();
                if (sum - 1.0).abs() > TOLERANCE {
                    return Err(ValueError::Malformed(format!("categorical sums to {sum}")));
                }
                Ok(())
            }
            Value::Boolean { .. } => Ok(()),
            Value::SurvivalCurve { points } => {
                if points.is_empty() {
                    return Err(ValueError::Malformed("empty survival curve".into()));
                }
                if points.iter().any(|(_, s)| !(0.0..=1.0).contains(s)) {
                    return Err(ValueError::Malformed("survival probability outside [0,1]".into()));
                }
                match check_survival_monotone(points)? {
                    Monotonicity::Ok => Ok(()),
                    Monotonicity::Violation(i) => Err(ValueError::Malformed(format!(
                        "survival curve increases at index {i}"
                    ))),
                }
            }
            Value::TimeToEventDensity { masses } => {
                if masses.iter().any(|(_, m)| !m.is_finite() || *m < 0.0) {
                    return Err(ValueError::Malformed("negative density mass".into()));
                }
                for (i, w) in masses.windows(2).enumerate() {
                    if w[1].0 <= w[0].0 {
                        return Err(ValueError::MalformedCurve(i + 1));
                    }
                }
                let total: f64 = masses.iter().map(|(_, m)| m).sum();
                if total > 1.0 + TOLERANCE {
                    return Err(ValueError::Malformed(format!("density mass sums to {total}")));
                }
                Ok(())
            }
        }
    }

    /// Equality within [`TOLERANCE`] on every numeric component.
    pub fn approx_eq(&self, other: &Value) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= TOLERANCE;
        match (self, other) {
            (Value::Continuous { value: a, .. }, Value::Continuous { value: b, .. }) => close(*a, *b),
            (Value::Probability { value: a }, Value::Probability { value: b }) => close(*a, *b),
            (Value::Boolean { value: a }, Value::Boolean { value: b }) => a == b,
            (Value::Categorical { probs: a }, Value::Categorical { probs: b }) => {
                a.len() == b.len()
                    && a.iter().zip(b).all(|((la, pa), (lb, pb))| la == lb && close(*pa, *pb))
            }
            (Value::SurvivalCurve { points: a }, Value::SurvivalCurve { points: b })
            | (Value::TimeToEventDensity { masses: a }, Value::TimeToEventDensity { masses: b }) => {
                a.len() == b.len()
                    && a.iter().zip(b).all(|((ha, pa), (hb, pb))| ha == hb && close(*pa, *pb))
            }
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Monotonicity {
    Ok,
    /// First index whose survival probability exceeds its predecessor.
    Violation(usize),
}

pub fn check_survival_monotone(points: &[(u32, f64)]) -> Result<Monotonicity, ValueError> {
    for (i, w) in points.windows(2).enumerate() {
        if w[1].0 <= w[0].0 {
            return Err(ValueError::MalformedCurve(i + 1));
        }
    }
    for (i, w) in points.windows(2).enumerate() {
        if w[1].1 > w[0].1 + TOLERANCE {
            return Ok(Monotonicity::Violation(i + 1));
        }
    }
    Ok(Monotonicity::Ok)
}

/// Probability of surviving past `horizon_days`.
///
/// Densities: mass on day `d` covers the interval `[d, d+1)`, so survival
/// past the horizon is one minus the mass on days strictly before it.
/// Curves: step function carried forward from the largest listed horizon not
/// after the query; 1.0 before the first point.
pub fn survival_at_horizon(value: &Value, horizon_days: u32) -> Result<f64, ValueError> {
    match value {
        Value::TimeToEventDensity { masses } => {
            let cumulative: f64 =
                masses.iter().filter(|(day, _)| *day < horizon_days).map(|(_, m)| m).sum();
            Ok((1.0 - cumulative).clamp(0.0, 1.0))
        }
        Value::SurvivalCurve { points } => Ok(points
            .iter()
            .take_while(|(h, _)| *h <= horizon_days)
            .last()
            .map(|(_, s)| *s)
            .unwrap_or(1.0)),
        other => Err(ValueError::TypeMismatch {
            expected: "survival_curve or time_to_event_density".into(),
            found: other.kind().to_string(),
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeStatus {
    Unknown,
    Measured,
    Predicted,
}

/// A base model's output for one attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub source: Signature,
    pub attribute: String,
    pub value: Value,
    pub provenance: ProvenanceChain,
    pub event_seq: u64,
}

impl Proposal {
    /// Builds a proposal, stamping the source signature onto the chain.
    pub fn new(
        model_id: &str,
        attribute: impl Into<String>,
        value: Value,
        inputs: ProvenanceChain,
        event_seq: u64,
    ) -> Self {
        let source = Signature::model(model_id);
        let mut provenance = inputs;
        provenance.push(source.clone());
        Self { source, attribute: attribute.into(), value, provenance, event_seq }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub event_seq: u64,
    pub timestamp: DateTime<Utc>,
    pub consensus: Value,
    pub status: AttributeStatus,
    pub provenance: ProvenanceChain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeState {
    pub consensus: Option<Value>,
    pub status: AttributeStatus,
    pub provenance: ProvenanceChain,
    /// Latest proposal per source model id.
    pub proposals: BTreeMap<String, Proposal>,
    pub history: Vec<HistoryEntry>,
}

impl Default for AttributeState {
    fn default() -> Self {
        Self {
            consensus: None,
            status: AttributeStatus::Unknown,
            provenance: ProvenanceChain::new(),
            proposals: BTreeMap::new(),
            history: Vec::new(),
        }
    }
}

impl AttributeState {
    pub fn is_available(&self) -> bool {
        self.status != AttributeStatus::Unknown
    }

    pub fn is_pinned(&self) -> bool {
        self.status == AttributeStatus::Measured
    }

    /// Sets a new consensus and records it in the history.
    pub(crate) fn record(
        &mut self,
        value: Value,
        status: AttributeStatus,
        provenance: ProvenanceChain,
        event_seq: u64,
        timestamp: DateTime<Utc>,
    ) {
        // One history entry per run; a second change in the same run replaces it.
        if self.history.last().is_some_and(|h| h.event_seq == event_seq) {
            self.history.pop();
        }
        self.history.push(HistoryEntry {
            event_seq,
            timestamp,
            consensus: value.clone(),
            status,
            provenance: provenance.clone(),
        });
        self.consensus = Some(value);
        self.status = status;
        self.provenance = provenance;
    }
}
