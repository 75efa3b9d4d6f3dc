//! Declarative registry of attributes, base models and fusion configurations.
//!
//! A [`Registry`] is an immutable, versioned snapshot. It is only ever built
//! through [`load_registry`] or [`Registry::update`], both of which validate the
//! whole document and report every problem they find.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use crate::types::{survival_at_horizon, Value, ValueError, ValueKind};

pub const DEFAULT_COMMAND_TIMEOUT_MS: u64 = 30_000;
pub const EXCHANGE_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Descriptors
// ---------------------------------------------------------------------------

/// Plausibility range: `[min, max]` for numeric kinds, a label list for
/// categorical ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Range {
    Numeric([f64; 2]),
    Labels(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Overwrite,
    WeightedAverage,
    MajorityVote,
    SurvivalAggregate,
    LogisticFusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingRule {
    #[default]
    Static,
    Accuracy,
    Entropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictPolicy {
    #[default]
    RefusePropagate,
    PassBack,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogisticFusionParams {
    pub bias: f64,
    pub weights: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub mode: FusionMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<BTreeMap<String, f64>>,
    #[serde(default)]
    pub weighting_rule: WeightingRule,
    #[serde(default)]
    pub conflict_policy: ConflictPolicy,
    /// Trained parameters for [`FusionMode::LogisticFusion`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logistic: Option<LogisticFusionParams>,
    /// Default query horizon for [`FusionMode::SurvivalAggregate`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon_days: Option<u32>,
}

impl FusionConfig {
    pub fn new(mode: FusionMode) -> Self {
        Self {
            mode,
            weights: None,
            weighting_rule: WeightingRule::Static,
            conflict_policy: ConflictPolicy::RefusePropagate,
            logistic: None,
            horizon_days: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeDescriptor {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub display_name: Option<String>,
    pub value_kind: ValueKind,
    #[serde(default)]
    pub unit: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<Range>,
    pub fusion: FusionConfig,
    /// Half-width of the band in which a continuous prediction counts as correct.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    /// Decision threshold for probability predictions (default 0.5).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision_threshold: Option<f64>,
}

impl AttributeDescriptor {
    pub fn new(id: impl Into<String>, value_kind: ValueKind, fusion: FusionConfig) -> Self {
        Self {
            id: id.into(),
            display_name: None,
            value_kind,
            unit: String::new(),
            range: None,
            fusion,
            tolerance: None,
            decision_threshold: None,
        }
    }

    pub fn with_range(mut self, range: Range) -> Self {
        self.range = Some(range);
        self
    }

    pub fn numeric_range(&self) -> Option<(f64, f64)> {
        match &self.range {
            Some(Range::Numeric([lo, hi])) => Some((*lo, *hi)),
            _ => None,
        }
    }

    pub fn labels(&self) -> Option<&[String]> {
        match &self.range {
            Some(Range::Labels(l)) => Some(l),
            _ => None,
        }
    }

    pub fn decision_threshold(&self) -> f64 {
        self.decision_threshold.unwrap_or(0.5)
    }

    /// Correctness band for continuous predictions: declared tolerance, else
    /// 10% of the plausibility range width.
    pub fn continuous_tolerance(&self) -> f64 {
        self.tolerance
            .or_else(|| self.numeric_range().map(|(lo, hi)| 0.1 * (hi - lo)))
            .unwrap_or(0.0)
    }

    pub fn is_survival(&self) -> bool {
        matches!(self.value_kind, ValueKind::SurvivalCurve | ValueKind::TimeToEventDensity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    ExternalInput,
    Constant,
    Table,
    Linear,
    Logistic,
    SurvivalTable,
    Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    #[default]
    Observational,
    Active,
    Monitoring,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputRef {
    pub attr: String,
    #[serde(default = "default_true")]
    pub required: bool,
}

fn default_true() -> bool {
    true
}

fn empty_object() -> serde_json::Value {
    serde_json::Value::Object(Default::default())
}

fn is_empty_object(v: &serde_json::Value) -> bool {
    v.as_object().is_some_and(|o| o.is_empty())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDescriptor {
    pub id: String,
    pub kind: ModelKind,
    #[serde(default)]
    pub inputs: Vec<InputRef>,
    pub outputs: Vec<String>,
    /// Kind-specific coefficients; parsed during validation.
    #[serde(default = "empty_object", skip_serializing_if = "is_empty_object")]
    pub params: serde_json::Value,
    #[serde(default)]
    pub phase: Phase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance_note: Option<String>,
}

impl ModelDescriptor {
    pub fn external(id: impl Into<String>, attr: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            kind: ModelKind::ExternalInput,
            inputs: Vec::new(),
            outputs: vec![attr.into()],
            params: empty_object(),
            phase: Phase::Observational,
            provenance_note: None,
        }
    }

    pub fn input_ids(&self) -> impl Iterator<Item = &str> {
        self.inputs.iter().map(|i| i.attr.as_str())
    }

    pub fn required_inputs(&self) -> impl Iterator<Item = &str> {
        self.inputs.iter().filter(|i| i.required).map(|i| i.attr.as_str())
    }
}

/// Raw file form of a registry.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryDocument {
    #[serde(default)]
    pub version: u64,
    #[serde(default)]
    pub attributes: Vec<AttributeDescriptor>,
    #[serde(default)]
    pub models: Vec<ModelDescriptor>,
}

// ---------------------------------------------------------------------------
// Typed model parameters
// ---------------------------------------------------------------------------

/// A literal output in Constant/Table params. Bare numbers, booleans and
/// labels are coerced to the output attribute's kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Number(f64),
    Flag(bool),
    Label(String),
    Full(Value),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coefficients {
    #[serde(default)]
    pub weights: BTreeMap<String, f64>,
    #[serde(default)]
    pub bias: f64,
}

/// Categorical encodings shared by score-based kinds: attr -> label -> code.
pub type Codes = BTreeMap<String, BTreeMap<String, f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreParams {
    pub outputs: BTreeMap<String, Coefficients>,
    pub codes: Codes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Baseline {
    Curve(Vec<(u32, f64)>),
    Density(Vec<(u32, f64)>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurvivalOutput {
    #[serde(default)]
    pub weights: BTreeMap<String, f64>,
    #[serde(default)]
    pub bias: f64,
    /// Without a baseline the output is the probability `σ(score)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<Baseline>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurvivalParams {
    pub outputs: BTreeMap<String, SurvivalOutput>,
    #[serde(default)]
    pub codes: Codes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableParams {
    pub keys: Vec<String>,
    #[serde(default)]
    pub bins: BTreeMap<String, Vec<f64>>,
    pub outputs: BTreeMap<String, BTreeMap<String, ParamValue>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantParams {
    pub outputs: BTreeMap<String, ParamValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandParams {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
    pub exchange_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelParams {
    External,
    Constant(ConstantParams),
    Table(TableParams),
    Linear(ScoreParams),
    Logistic(ScoreParams),
    SurvivalTable(SurvivalParams),
    Command(CommandParams),
}

/// Score params accept either a per-output map or, for single-output models,
/// a flat `{"weights", "bias"}` form.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScoreParams {
    #[serde(default)]
    weights: Option<BTreeMap<String, f64>>,
    #[serde(default)]
    bias: Option<f64>,
    #[serde(default)]
    outputs: Option<BTreeMap<String, Coefficients>>,
    #[serde(default)]
    codes: Codes,
}

fn parse_params(model: &ModelDescriptor) -> Result<ModelParams, String> {
    fn from<T: serde::de::DeserializeOwned>(v: &serde_json::Value) -> Result<T, String> {
        serde_json::from_value(v.clone()).map_err(|e| e.to_string())
    }
    let p = &model.params;
    Ok(match model.kind {
        ModelKind::ExternalInput => {
            if !is_empty_object(p) && !p.is_null() {
                return Err("external input models take no params".into());
            }
            ModelParams::External
        }
        ModelKind::Constant => ModelParams::Constant(from(p)?),
        ModelKind::Table => ModelParams::Table(from(p)?),
        ModelKind::Linear | ModelKind::Logistic => {
            let raw: RawScoreParams = from(p)?;
            let outputs = match (raw.outputs, raw.weights, raw.bias) {
                (Some(o), None, None) => o,
                (None, w, b) => {
                    if model.outputs.len() != 1 {
                        return Err("flat weights/bias form needs exactly one output".into());
                    }
                    let coeff = Coefficients { weights: w.unwrap_or_default(), bias: b.unwrap_or(0.0) };
                    BTreeMap::from([(model.outputs[0].clone(), coeff)])
                }
                _ => return Err("use either `outputs` or flat `weights`/`bias`, not both".into()),
            };
            let score = ScoreParams { outputs, codes: raw.codes };
            if model.kind == ModelKind::Linear {
                ModelParams::Linear(score)
            } else {
                ModelParams::Logistic(score)
            }
        }
        ModelKind::SurvivalTable => ModelParams::SurvivalTable(from(p)?),
        ModelKind::Command => ModelParams::Command(from(p)?),
    })
}

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RegistryError {
    #[error("cannot parse registry document: {0}")]
    Parse(String),
    #[error("duplicate {what} id {id:?}")]
    DuplicateId { what: &'static str, id: String },
    #[error("model {model:?} references undeclared attribute {attr:?}")]
    UnknownAttributeRef { model: String, attr: String },
    #[error("model {model:?} lists attribute {attr:?} as both input and output")]
    SelfLoopModel { model: String, attr: String },
    #[error("malformed fusion config on {attr:?}: {detail}")]
    MalformedFusionConfig { attr: String, detail: String },
    #[error("malformed model {model:?}: {detail}")]
    MalformedModel { model: String, detail: String },
    #[error("malformed attribute {attr:?}: {detail}")]
    MalformedAttribute { attr: String, detail: String },
    #[error("unknown attribute {0:?}")]
    UnknownAttribute(String),
    #[error("unknown model {0:?}")]
    UnknownModel(String),
}

/// Every problem found while validating one document.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub struct ValidationErrors(pub Vec<RegistryError>);

impl fmt::Display for ValidationErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} registry error(s)", self.0.len())?;
        for e in &self.0 {
            write!(f, "\n  - {e}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("missing required input {0:?}")]
    MissingRequiredInput(String),
    #[error("evaluator failure: {0}")]
    EvaluatorFailure(String),
    #[error("evaluator timed out after {0} ms")]
    Timeout(u64),
}

// ---------------------------------------------------------------------------
// Registry
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributeNeighborhood {
    pub attribute: String,
    pub informing: Vec<String>,
    pub informed: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Registry {
    version: u64,
    attributes: BTreeMap<String, AttributeDescriptor>,
    models: BTreeMap<String, ModelDescriptor>,
    params: BTreeMap<String, ModelParams>,
}

/// Additions or replacements, keyed by id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryUpdate {
    #[serde(default)]
    pub attributes: Vec<AttributeDescriptor>,
    #[serde(default)]
    pub models: Vec<ModelDescriptor>,
}

pub fn load_registry(document: &str) -> Result<Registry, ValidationErrors> {
    let doc: RegistryDocument = serde_json::from_str(document)
        .map_err(|e| ValidationErrors(vec![RegistryError::Parse(e.to_string())]))?;
    Registry::from_document(doc)
}

pub fn neighborhood(registry: &Registry, attr: &str) -> Result<AttributeNeighborhood, RegistryError> {
    registry.neighborhood(attr)
}

impl Registry {
    pub fn empty() -> Self {
        Self {
            version: 0,
            attributes: BTreeMap::new(),
            models: BTreeMap::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn from_document(doc: RegistryDocument) -> Result<Self, ValidationErrors> {
        let mut errors = Vec::new();
        let mut attributes = BTreeMap::new();
        for a in doc.attributes {
            if attributes.contains_key(&a.id) {
                errors.push(RegistryError::DuplicateId { what: "attribute", id: a.id.clone() });
            } else {
                attributes.insert(a.id.clone(), a);
            }
        }
        let mut models = BTreeMap::new();
        for m in doc.models {
            if models.contains_key(&m.id) {
                errors.push(RegistryError::DuplicateId { what: "model", id: m.id.clone() });
            } else {
                models.insert(m.id.clone(), m);
            }
        }

        // Graph node ids must be unambiguous across both node kinds.
        for id in models.keys().filter(|id| attributes.contains_key(*id)) {
            errors.push(RegistryError::DuplicateId { what: "node", id: id.clone() });
        }
        for a in attributes.values() {
            validate_attribute(a, &mut errors);
        }
        let mut params = BTreeMap::new();
        for m in models.values() {
            if let Some(p) = validate_model(m, &attributes, &mut errors) {
                params.insert(m.id.clone(), p);
            }
        }
        for a in attributes.values() {
            validate_fusion(a, &models, &mut errors);
        }

        if errors.is_empty() {
            Ok(Self { version: doc.version, attributes, models, params })
        } else {
            Err(ValidationErrors(errors))
        }
    }

    pub fn to_document(&self) -> RegistryDocument {
        RegistryDocument {
            version: self.version,
            attributes: self.attributes.values().cloned().collect(),
            models: self.models.values().cloned().collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("registry serializes")
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn attributes(&self) -> &BTreeMap<String, AttributeDescriptor> {
        &self.attributes
    }

    pub fn models(&self) -> &BTreeMap<String, ModelDescriptor> {
        &self.models
    }

    pub fn attribute(&self, id: &str) -> Result<&AttributeDescriptor, RegistryError> {
        self.attributes.get(id).ok_or_else(|| RegistryError::UnknownAttribute(id.to_string()))
    }

    pub fn model(&self, id: &str) -> Result<&ModelDescriptor, RegistryError> {
        self.models.get(id).ok_or_else(|| RegistryError::UnknownModel(id.to_string()))
    }

    pub fn params(&self, model_id: &str) -> Option<&ModelParams> {
        self.params.get(model_id)
    }

    pub fn neighborhood(&self, attr: &str) -> Result<AttributeNeighborhood, RegistryError> {
        self.attribute(attr)?;
        let informing =
            self.models.values().filter(|m| m.outputs.iter().any(|o| o == attr)).map(|m| m.id.clone());
        let informed =
            self.models.values().filter(|m| m.input_ids().any(|i| i == attr)).map(|m| m.id.clone());
        Ok(AttributeNeighborhood {
            attribute: attr.to_string(),
            informing: informing.collect(),
            informed: informed.collect(),
        })
    }

    /// Models that can propose a value for `attr` (external inputs excluded).
    pub fn proposing_models(&self, attr: &str) -> Vec<&str> {
        self.models
            .values()
            .filter(|m| m.kind != ModelKind::ExternalInput && m.outputs.iter().any(|o| o == attr))
            .map(|m| m.id.as_str())
            .collect()
    }

    /// Merges additions/replacements into a new snapshot with version + 1.
    /// `self` is never modified.
    pub fn update(&self, update: RegistryUpdate) -> Result<Registry, ValidationErrors> {
        let mut doc = self.to_document();
        for a in update.attributes {
            match doc.attributes.iter_mut().find(|x| x.id == a.id) {
                Some(slot) => *slot = a,
                None => doc.attributes.push(a),
            }
        }
        for m in update.models {
            match doc.models.iter_mut().find(|x| x.id == m.id) {
                Some(slot) => *slot = m,
                None => doc.models.push(m),
            }
        }
        doc.version = self.version + 1;
        Registry::from_document(doc)
    }

    /// Evaluates a builtin or command model on the given inputs.
    ///
    /// Absent optional inputs are simply missing from `inputs`.
    pub fn evaluate_model(
        &self,
        model_id: &str,
        inputs: &BTreeMap<String, Value>,
    ) -> Result<BTreeMap<String, Value>, EvalError> {
        let model = self.model(model_id).map_err(|e| EvalError::EvaluatorFailure(e.to_string()))?;
        for req in model.required_inputs() {
            if !inputs.contains_key(req) {
                return Err(EvalError::MissingRequiredInput(req.to_string()));
            }
        }
        let params = self
            .params
            .get(model_id)
            .ok_or_else(|| EvalError::EvaluatorFailure(format!("no params for {model_id}")))?;
        let raw = match params {
            ModelParams::External => {
                return Err(EvalError::EvaluatorFailure(format!(
                    "{model_id} is an external input and cannot be evaluated"
                )))
            }
            ModelParams::Constant(p) => p
                .outputs
                .iter()
                .map(|(out, pv)| Ok((out.clone(), self.coerce(out, pv)?)))
                .collect::<Result<_, EvalError>>()?,
            ModelParams::Table(p) => self.eval_table(p, inputs)?,
            ModelParams::Linear(p) => self.eval_linear(p, inputs)?,
            ModelParams::Logistic(p) => eval_logistic(p, inputs)?,
            ModelParams::SurvivalTable(p) => eval_survival(p, inputs)?,
            ModelParams::Command(p) => run_command(model, p, inputs)?,
        };
        for out in &model.outputs {
            let value = raw
                .get(out)
                .ok_or_else(|| EvalError::EvaluatorFailure(format!("no value produced for {out:?}")))?;
            let desc = &self.attributes[out];
            value_conforms(value, desc).map_err(|e| {
                EvalError::EvaluatorFailure(format!("output {out:?} does not conform: {e}"))
            })?;
        }
        Ok(raw.into_iter().filter(|(k, _)| model.outputs.contains(k)).collect())
    }

    fn coerce(&self, out: &str, pv: &ParamValue) -> Result<Value, EvalError> {
        let desc = &self.attributes[out];
        let bad = || {
            EvalError::EvaluatorFailure(format!("literal {pv:?} does not fit {} output {out:?}", desc.value_kind))
        };
        Ok(match (pv, desc.value_kind) {
            (ParamValue::Full(v), _) => v.clone(),
            (ParamValue::Number(x), ValueKind::Continuous) => Value::continuous(*x),
            (ParamValue::Number(x), ValueKind::Probability) => Value::probability(*x),
            (ParamValue::Flag(b), ValueKind::Boolean) => Value::boolean(*b),
            (ParamValue::Label(l), ValueKind::Categorical) => match desc.labels() {
                Some(labels) => Value::label(l, labels.iter().map(String::as_str)),
                None => Value::label(l, []),
            },
            _ => return Err(bad()),
        })
    }

    fn eval_table(
        &self,
        p: &TableParams,
        inputs: &BTreeMap<String, Value>,
    ) -> Result<BTreeMap<String, Value>, EvalError> {
        let mut parts = Vec::with_capacity(p.keys.len());
        for key in &p.keys {
            let part = match inputs.get(key) {
                None => "absent".to_string(),
                Some(Value::Boolean { value }) => value.to_string(),
                Some(v @ Value::Categorical { .. }) => v.argmax_label().unwrap_or_default().to_string(),
                Some(Value::Continuous { value, .. }) | Some(Value::Probability { value }) => {
                    let edges = p.bins.get(key).ok_or_else(|| {
                        EvalError::EvaluatorFailure(format!("numeric table key {key:?} has no bins"))
                    })?;
                    edges.iter().filter(|e| **e <= *value).count().to_string()
                }
                Some(other) => {
                    return Err(EvalError::EvaluatorFailure(format!(
                        "table key {key:?} cannot be discretized from {}",
                        other.kind()
                    )))
                }
            };
            parts.push(part);
        }
        let key = parts.join(",");
        p.outputs
            .iter()
            .map(|(out, rows)| {
                let pv = rows
                    .get(&key)
                    .ok_or_else(|| EvalError::EvaluatorFailure(format!("no table row for key {key:?}")))?;
                Ok((out.clone(), self.coerce(out, pv)?))
            })
            .collect()
    }

    fn eval_linear(
        &self,
        p: &ScoreParams,
        inputs: &BTreeMap<String, Value>,
    ) -> Result<BTreeMap<String, Value>, EvalError> {
        p.outputs
            .iter()
            .map(|(out, coeff)| {
                let mut y = score(&coeff.weights, coeff.bias, &p.codes, inputs)?;
                let desc = &self.attributes[out];
                if let Some((lo, hi)) = desc.numeric_range() {
                    y = y.clamp(lo, hi);
                }
                let v = match desc.value_kind {
                    ValueKind::Probability => Value::probability(y.clamp(0.0, 1.0)),
                    _ => Value::continuous(y),
                };
                Ok((out.clone(), v))
            })
            .collect()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numeric reading of one input for affine scores.
fn feature(attr: &str, value: &Value, codes: &Codes) -> Result<f64, EvalError> {
    match value {
        Value::Continuous { value, .. } | Value::Probability { value } => Ok(*value),
        Value::Boolean { value } => Ok(if *value { 1.0 } else { 0.0 }),
        Value::Categorical { probs } => {
            let table = codes.get(attr).ok_or_else(|| {
                EvalError::EvaluatorFailure(format!("categorical input {attr:?} has no codes"))
            })?;
            probs
                .iter()
                .map(|(label, p)| {
                    table.get(label).map(|c| p * c).ok_or_else(|| {
                        EvalError::EvaluatorFailure(format!("no code for {attr:?}={label:?}"))
                    })
                })
                .sum()
        }
        other => Err(EvalError::EvaluatorFailure(format!(
            "input {attr:?} of kind {} has no numeric encoding",
            other.kind()
        ))),
    }
}

/// `Σ wᵢxᵢ + b` over the inputs that are present; absent terms drop out.
fn score(
    weights: &BTreeMap<String, f64>,
    bias: f64,
    codes: &Codes,
    inputs: &BTreeMap<String, Value>,
) -> Result<f64, EvalError> {
    let mut acc = bias;
    for (attr, w) in weights {
        if let Some(v) = inputs.get(attr) {
            acc += w * feature(attr, v, codes)?;
        }
    }
    Ok(acc)
}

fn eval_logistic(p: &ScoreParams, inputs: &BTreeMap<String, Value>) -> Result<BTreeMap<String, Value>, EvalError> {
    p.outputs
        .iter()
        .map(|(out, c)| Ok((out.clone(), Value::probability(sigmoid(score(&c.weights, c.bias, &p.codes, inputs)?)))))
        .collect()
}

/// Baseline survival raised to `2σ(score)`: a neutral score reproduces the
/// baseline, higher risk bends the curve down.
fn eval_survival(p: &SurvivalParams, inputs: &BTreeMap<String, Value>) -> Result<BTreeMap<String, Value>, EvalError> {
    p.outputs
        .iter()
        .map(|(out, spec)| {
            let risk = sigmoid(score(&spec.weights, spec.bias, &p.codes, inputs)?);
            let exponent = 2.0 * risk;
            let v = match &spec.baseline {
                None => Value::probability(risk),
                Some(Baseline::Curve(points)) => {
                    Value::curve(points.iter().map(|(h, s)| (*h, s.powf(exponent))).collect())
                }
                Some(Baseline::Density(masses)) => {
                    let mut before = 1.0f64;
                    let mut out_masses = Vec::with_capacity(masses.len());
                    for (day, m) in masses {
                        let after = (before - m).max(0.0);
                        out_masses.push((*day, (before.powf(exponent) - after.powf(exponent)).max(0.0)));
                        before = after;
                    }
                    Value::density(out_masses)
                }
            };
            Ok((out.clone(), v))
        })
        .collect()
}

#[derive(Serialize)]
struct ExchangeRequest<'a> {
    inputs: &'a BTreeMap<String, Value>,
}

#[derive(Deserialize)]
struct ExchangeReply {
    outputs: BTreeMap<String, Value>,
}

/// Runs a command-kind model: one JSON request line on stdin, one JSON reply
/// on stdout, nonzero exit is a failure, the child is killed on timeout.
fn run_command(
    model: &ModelDescriptor,
    p: &CommandParams,
    inputs: &BTreeMap<String, Value>,
) -> Result<BTreeMap<String, Value>, EvalError> {
    let timeout_ms = p.timeout_ms.unwrap_or(DEFAULT_COMMAND_TIMEOUT_MS);
    let mut child = Command::new(&p.program)
        .args(&p.args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| EvalError::EvaluatorFailure(format!("{}: cannot spawn {:?}: {e}", model.id, p.program)))?;

    let mut request = serde_json::to_vec(&ExchangeRequest { inputs }).expect("inputs serialize");
    request.push(b'\n');
    let mut stdin = child.stdin.take().expect("piped stdin");
    // A child that exits without reading its input yields EPIPE here; the
    // exit status below is what decides the outcome.
    let _ = stdin.write_all(&request);
    drop(stdin);

    let mut stdout = child.stdout.take().expect("piped stdout");
    let mut stderr = child.stderr.take().expect("piped stderr");
    let out_reader = std::thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = stdout.read_to_end(&mut buf);
        buf
    });
    let err_reader = std::thread::spawn(move || {
        let mut buf = String::new();
        let _ = stderr.read_to_string(&mut buf);
        buf
    });

    let status = match child.wait_timeout(Duration::from_millis(timeout_ms)) {
        Ok(Some(status)) => status,
        Ok(None) => {
            let _ = child.kill();
            let _ = child.wait();
            return Err(EvalError::Timeout(timeout_ms));
        }
        Err(e) => return Err(EvalError::EvaluatorFailure(format!("{}: wait failed: {e}", model.id))),
    };
    let out = out_reader.join().unwrap_or_default();
    let err = err_reader.join().unwrap_or_default();
    if !status.success() {
        return Err(EvalError::EvaluatorFailure(format!(
            "{} exited with {status}: {}",
            model.id,
            err.trim()
        )));
    }
    let reply: ExchangeReply = serde_json::from_slice(&out)
        .map_err(|e| EvalError::EvaluatorFailure(format!("{}: bad reply: {e}", model.id)))?;
    Ok(reply.outputs)
}

// ---------------------------------------------------------------------------
// Conformance and validation
// ---------------------------------------------------------------------------

/// Checks a value against an attribute's declared kind and plausibility range.
///
/// Survival attributes accept both curves and densities, since models report
/// survival at different granularities.
pub fn value_conforms(value: &Value, descriptor: &AttributeDescriptor) -> Result<(), ValueError> {
    let kind_ok = value.kind() == descriptor.value_kind
        || (descriptor.is_survival()
            && matches!(value.kind(), ValueKind::SurvivalCurve | ValueKind::TimeToEventDensity));
    if !kind_ok {
        return Err(ValueError::TypeMismatch {
            expected: descriptor.value_kind.to_string(),
            found: value.kind().to_string(),
        });
    }
    value.validate()?;
    if let (Some(x), Some((min, max))) = (value.as_number(), descriptor.numeric_range()) {
        if x < min || x > max {
            return Err(ValueError::OutOfPlausibleRange { value: x, min, max });
        }
    }
    if let (Value::Categorical { probs }, Some(labels)) = (value, descriptor.labels()) {
        if let Some(label) = probs.keys().find(|l| !labels.contains(l)) {
            return Err(ValueError::UnknownLabel { label: label.clone() });
        }
    }
    Ok(())
}

/// Ground-truth labels additionally accept a boolean for probability attributes.
pub fn label_conforms(value: &Value, descriptor: &AttributeDescriptor) -> Result<(), ValueError> {
    if descriptor.value_kind == ValueKind::Probability && matches!(value, Value::Boolean { .. }) {
        return Ok(());
    }
    value_conforms(value, descriptor)
}

fn validate_attribute(a: &AttributeDescriptor, errors: &mut Vec<RegistryError>) {
    let bad = |detail: String| RegistryError::MalformedAttribute { attr: a.id.clone(), detail };
    if a.id.is_empty() {
        errors.push(bad("empty id".into()));
    }
    match (&a.range, a.value_kind) {
        (Some(Range::Numeric([lo, hi])), ValueKind::Continuous | ValueKind::Probability) => {
            if !(lo <= hi) {
                errors.push(bad(format!("range [{lo}, {hi}] is empty")));
            }
        }
        (Some(Range::Labels(labels)), ValueKind::Categorical) => {
            if labels.is_empty() {
                errors.push(bad("empty label set".into()));
            }
        }
        (Some(_), kind) => errors.push(bad(format!("range does not apply to {kind} values"))),
        (None, _) => {}
    }
    if let Some(t) = a.decision_threshold {
        if !(0.0..=1.0).contains(&t) {
            errors.push(bad(format!("decision threshold {t} outside [0,1]")));
        }
    }
}

fn validate_model(
    m: &ModelDescriptor,
    attributes: &BTreeMap<String, AttributeDescriptor>,
    errors: &mut Vec<RegistryError>,
) -> Option<ModelParams> {
    let bad = |detail: String| RegistryError::MalformedModel { model: m.id.clone(), detail };
    if m.id.is_empty() {
        errors.push(bad("empty id".into()));
    }
    let mut refs_ok = true;
    for attr in m.input_ids().chain(m.outputs.iter().map(String::as_str)) {
        if !attributes.contains_key(attr) {
            errors.push(RegistryError::UnknownAttributeRef { model: m.id.clone(), attr: attr.to_string() });
            refs_ok = false;
        }
    }
    let inputs: BTreeSet<&str> = m.input_ids().collect();
    if inputs.len() != m.inputs.len() {
        errors.push(bad("duplicate input attribute".into()));
    }
    let outputs: BTreeSet<&str> = m.outputs.iter().map(String::as_str).collect();
    if outputs.len() != m.outputs.len() {
        errors.push(bad("duplicate output attribute".into()));
    }
    for attr in inputs.intersection(&outputs) {
        errors.push(RegistryError::SelfLoopModel { model: m.id.clone(), attr: attr.to_string() });
    }
    if m.kind == ModelKind::ExternalInput {
        if m.outputs.len() != 1 || !m.inputs.is_empty() {
            errors.push(bad("external input models have no inputs and exactly one output".into()));
        }
    } else if m.outputs.is_empty() {
        errors.push(bad("no outputs".into()));
    }

    let params = match parse_params(m) {
        Ok(p) => p,
        Err(e) => {
            errors.push(bad(format!("params: {e}")));
            return None;
        }
    };
    if !refs_ok {
        return Some(params);
    }
    let kind_of = |attr: &str| attributes[attr].value_kind;
    let check_outputs = |keys: BTreeSet<&str>, errors: &mut Vec<RegistryError>| {
        if keys != outputs {
            errors.push(bad(format!("params cover outputs {keys:?}, declared {outputs:?}")));
        }
    };
    let check_weights = |weights: &BTreeMap<String, f64>, errors: &mut Vec<RegistryError>| {
        for attr in weights.keys() {
            if !inputs.contains(attr.as_str()) {
                errors.push(bad(format!("weight on {attr:?}, which is not an input")));
            }
        }
    };
    match &params {
        ModelParams::External => {}
        ModelParams::Constant(p) => check_outputs(p.outputs.keys().map(String::as_str).collect(), errors),
        ModelParams::Table(p) => {
            check_outputs(p.outputs.keys().map(String::as_str).collect(), errors);
            for key in &p.keys {
                if !inputs.contains(key.as_str()) {
                    errors.push(bad(format!("table key {key:?} is not an input")));
                } else if matches!(kind_of(key), ValueKind::Continuous | ValueKind::Probability)
                    && !p.bins.contains_key(key)
                {
                    errors.push(bad(format!("numeric table key {key:?} needs bins")));
                }
            }
        }
        ModelParams::Linear(p) | ModelParams::Logistic(p) => {
            check_outputs(p.outputs.keys().map(String::as_str).collect(), errors);
            for (out, c) in &p.outputs {
                check_weights(&c.weights, errors);
                let ok = match m.kind {
                    ModelKind::Logistic => kind_of(out) == ValueKind::Probability,
                    _ => matches!(kind_of(out), ValueKind::Continuous | ValueKind::Probability),
                };
                if outputs.contains(out.as_str()) && !ok {
                    errors.push(bad(format!("cannot produce {} output {out:?}", kind_of(out))));
                }
            }
        }
        ModelParams::SurvivalTable(p) => {
            check_outputs(p.outputs.keys().map(String::as_str).collect(), errors);
            for (out, spec) in &p.outputs {
                check_weights(&spec.weights, errors);
                if !outputs.contains(out.as_str()) {
                    continue;
                }
                match &spec.baseline {
                    None if kind_of(out) != ValueKind::Probability => {
                        errors.push(bad(format!("output {out:?} without baseline must be a probability")))
                    }
                    Some(b) => {
                        if !attributes[out].is_survival() {
                            errors.push(bad(format!("survival baseline on non-survival output {out:?}")));
                        }
                        let v = match b {
                            Baseline::Curve(pts) => Value::curve(pts.clone()),
                            Baseline::Density(ms) => Value::density(ms.clone()),
                        };
                        if let Err(e) = v.validate() {
                            errors.push(bad(format!("baseline for {out:?}: {e}")));
                        }
                    }
                    None => {}
                }
            }
        }
        ModelParams::Command(p) => {
            if p.program.is_empty() {
                errors.push(bad("command needs a program path".into()));
            }
            if p.exchange_version != EXCHANGE_VERSION {
                errors.push(bad(format!(
                    "unsupported exchange version {} (expected {EXCHANGE_VERSION})",
                    p.exchange_version
                )));
            }
        }
    }
    Some(params)
}

fn validate_fusion(
    a: &AttributeDescriptor,
    models: &BTreeMap<String, ModelDescriptor>,
    errors: &mut Vec<RegistryError>,
) {
    let bad = |detail: String| RegistryError::MalformedFusionConfig { attr: a.id.clone(), detail };
    let cfg = &a.fusion;
    let proposing: Vec<&str> = models
        .values()
        .filter(|m| m.kind != ModelKind::ExternalInput && m.outputs.contains(&a.id))
        .map(|m| m.id.as_str())
        .collect();
    if let Some(w) = &cfg.weights {
        for (model, weight) in w {
            if !(weight.is_finite() && *weight >= 0.0) {
                errors.push(bad(format!("weight for {model:?} must be finite and non-negative")));
            }
            if !proposing.contains(&model.as_str()) {
                errors.push(bad(format!("weight for {model:?}, which does not inform this attribute")));
            }
        }
    }
    let needs_static = matches!(cfg.mode, FusionMode::WeightedAverage | FusionMode::SurvivalAggregate)
        && cfg.weighting_rule == WeightingRule::Static;
    if needs_static && !proposing.is_empty() {
        match &cfg.weights {
            None => errors.push(bad("static weighting needs weights".into())),
            Some(w) => {
                for m in &proposing {
                    if !w.contains_key(*m) {
                        errors.push(bad(format!("static weights miss informing model {m:?}")));
                    }
                }
            }
        }
    }
    match cfg.mode {
        FusionMode::WeightedAverage => {
            if !matches!(a.value_kind, ValueKind::Continuous | ValueKind::Probability) {
                errors.push(bad(format!("weighted average over {} values", a.value_kind)));
            }
            if cfg.weighting_rule == WeightingRule::Entropy && a.value_kind != ValueKind::Probability {
                errors.push(bad("entropy weighting needs probability values".into()));
            }
        }
        FusionMode::MajorityVote => {
            if !matches!(a.value_kind, ValueKind::Categorical | ValueKind::Boolean) {
                errors.push(bad(format!("majority vote over {} values", a.value_kind)));
            }
        }
        FusionMode::SurvivalAggregate => {
            if !a.is_survival() {
                errors.push(bad("survival aggregation on a non-survival attribute".into()));
            }
            if cfg.horizon_days.is_none_or(|h| h == 0) {
                errors.push(bad("survival aggregation needs a positive horizon_days".into()));
            }
        }
        FusionMode::LogisticFusion => {
            if a.value_kind != ValueKind::Probability {
                errors.push(bad("logistic fusion needs probability values".into()));
            }
            if let Some(l) = &cfg.logistic {
                for model in l.weights.keys() {
                    if !proposing.contains(&model.as_str()) {
                        errors.push(bad(format!("logistic weight for unknown informer {model:?}")));
                    }
                }
            }
        }
        FusionMode::Overwrite => {}
    }
    if cfg.mode != FusionMode::LogisticFusion && cfg.logistic.is_some() {
        errors.push(bad("logistic params on a non-logistic fusion".into()));
    }
    if cfg.mode != FusionMode::SurvivalAggregate && cfg.horizon_days.is_some() {
        errors.push(bad("horizon_days only applies to survival aggregation".into()));
    }
}

/// Survival at a horizon for either survival representation; convenience
/// re-export for evaluator-side checks.
pub fn survival_value_at(value: &Value, horizon_days: u32) -> Result<f64, ValueError> {
    survival_at_horizon(value, horizon_days)
}
