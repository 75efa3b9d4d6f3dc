//! Data backbone: patient records with an append-only run log, the digital
//! cohort of completed journeys, and retraining of fusion weights.
//!
//! Layout under the store root:
//!
//! ```text
//! patients/<id>.json         record (status, twin state)
//! patients/<id>.runs.jsonl   one committed RunReport per line
//! cohort/ground_truth.json   patient -> attribute -> label
//! cohort/performance.json    counters per (model, attribute)
//! cohort/evaluations.json    every stored (prediction, label) pair
//! registry/v<N>.json         every registry version ever used
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::builder::{PersistedTwin, TwinState};
use crate::engine::RunReport;
use crate::fusion::{ModelPerformance, PRIOR_ACCURACY};
use crate::registry::{
    label_conforms, sigmoid, AttributeDescriptor, FusionMode, LogisticFusionParams, Registry, RegistryError,
    RegistryUpdate, ValidationErrors, WeightingRule,
};
use crate::types::{survival_at_horizon, Value, ValueError, ValueKind};

pub const LOGISTIC_MAX_ITER: usize = 1000;
pub const LOGISTIC_TOLERANCE: f64 = 1e-8;
/// Keeps the Newton system solvable on separable data.
pub const LOGISTIC_RIDGE: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum BackboneError {
    #[error("store i/o: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt store file {path}: {detail}")]
    Corrupt { path: String, detail: String },
    #[error("invalid patient id {0:?}")]
    InvalidPatientId(String),
    #[error("unknown patient {0:?}")]
    UnknownPatient(String),
    #[error("patient {0:?} already exists")]
    PatientExists(String),
    #[error("journey of {0:?} is completed; the record is frozen")]
    JourneyCompleted(String),
    #[error("journey of {0:?} was already completed")]
    AlreadyCompleted(String),
    #[error("event sequence gap: expected {expected}, got {found}")]
    EventSequenceGap { expected: u64, found: u64 },
    #[error("ephemeral what-if reports are never committed")]
    EphemeralReport,
    #[error("invalid label for {attribute:?}: {error}")]
    InvalidLabel { attribute: String, error: ValueError },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("registry version {0} already stored with different content")]
    RegistryVersionExists(u64),
    #[error("registry version {0} not found in store")]
    MissingRegistry(u64),
    #[error(transparent)]
    Validation(#[from] ValidationErrors),
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JourneyStatus {
    Active,
    Completed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub registry_version: u64,
    pub journey_status: JourneyStatus,
    pub run_count: u64,
    pub last_event_seq: u64,
    /// Twin state after the last committed run, including attribute histories.
    pub twin: PersistedTwin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub patient: String,
    pub model: String,
    pub attribute: String,
    pub prediction: Value,
    pub label: Value,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sq_error: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DigitalCohort {
    pub ground_truth: BTreeMap<String, BTreeMap<String, Value>>,
    pub performance: Vec<ModelPerformance>,
    pub evaluations: Vec<Evaluation>,
}

impl DigitalCohort {
    pub fn completed(&self) -> BTreeSet<&str> {
        self.ground_truth.keys().map(String::as_str).collect()
    }

    fn perf_mut(&mut self, model: &str, attribute: &str) -> &mut ModelPerformance {
        let pos = self.performance.iter().position(|p| p.model == model && p.attribute == attribute);
        let pos = match pos {
            Some(p) => p,
            None => {
                self.performance.push(ModelPerformance::new(model, attribute));
                self.performance.sort_by(|a, b| (&a.attribute, &a.model).cmp(&(&b.attribute, &b.model)));
                self.performance.iter().position(|p| p.model == model && p.attribute == attribute).expect("inserted")
            }
        };
        &mut self.performance[pos]
    }

    /// Counters rebuilt from the stored (prediction, label) pairs alone.
    pub fn recompute_performance(&self, registry: &Registry) -> Vec<ModelPerformance> {
        let mut scratch = DigitalCohort::default();
        for e in &self.evaluations {
            let Ok(desc) = registry.attribute(&e.attribute) else { continue };
            if let Some(score) = score_prediction(desc, &e.prediction, &e.label) {
                scratch.count(&e.model, &e.attribute, score);
            }
        }
        scratch.performance
    }

    fn count(&mut self, model: &str, attribute: &str, score: Score) {
        let p = self.perf_mut(model, attribute);
        p.n_evaluated += 1;
        if score.correct {
            p.n_correct += 1;
        }
        if let Some(se) = score.sq_error {
            p.sum_sq_error += se;
        }
    }
}

pub fn cohort_stats(cohort: &DigitalCohort, model: &str, attribute: &str) -> ModelPerformance {
    cohort
        .performance
        .iter()
        .find(|p| p.model == model && p.attribute == attribute)
        .cloned()
        .unwrap_or_else(|| ModelPerformance::new(model, attribute))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub correct: bool,
    pub sq_error: Option<f64>,
}

/// Binary truth of a label for a probability attribute.
fn truth(desc: &AttributeDescriptor, label: &Value) -> Option<bool> {
    match label {
        Value::Boolean { value } => Some(*value),
        Value::Probability { value } => Some(*value >= desc.decision_threshold()),
        _ => None,
    }
}

/// Correctness of one prediction against its label, or `None` when the two
/// cannot be compared.
pub fn score_prediction(desc: &AttributeDescriptor, prediction: &Value, label: &Value) -> Option<Score> {
    let discrete = |correct| Some(Score { correct, sq_error: None });
    match desc.value_kind {
        ValueKind::Probability => {
            let p = prediction.as_number()?;
            discrete((p >= desc.decision_threshold()) == truth(desc, label)?)
        }
        ValueKind::Boolean => match (prediction, label) {
            (Value::Boolean { value: a }, Value::Boolean { value: b }) => discrete(a == b),
            _ => None,
        },
        ValueKind::Categorical => discrete(prediction.argmax_label()? == label.argmax_label()?),
        ValueKind::Continuous => {
            let (p, l) = (prediction.as_number()?, label.as_number()?);
            let err = p - l;
            Some(Score { correct: err.abs() <= desc.continuous_tolerance(), sq_error: Some(err * err) })
        }
        ValueKind::SurvivalCurve | ValueKind::TimeToEventDensity => {
            let h = desc.fusion.horizon_days?;
            let p = survival_at_horizon(prediction, h).ok()?;
            let l = survival_at_horizon(label, h).ok()?;
            discrete((p >= 0.5) == (l >= 0.5))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightDiff {
    pub attribute: String,
    /// A model id, or `"bias"` for logistic fusions.
    pub parameter: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub old: Option<f64>,
    pub new: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrainOutcome {
    pub registry: Registry,
    pub weight_diffs: Vec<WeightDiff>,
}

/// Training rows for one logistic fusion: per patient, each informing model's
/// prediction (absent = 0, i.e. the term drops out) and the binary label.
pub fn logistic_rows(
    cohort: &DigitalCohort,
    desc: &AttributeDescriptor,
    models: &[&str],
) -> Vec<(Vec<f64>, bool)> {
    let mut by_patient: BTreeMap<&str, BTreeMap<&str, f64>> = BTreeMap::new();
    for e in cohort.evaluations.iter().filter(|e| e.attribute == desc.id) {
        if let Some(p) = e.prediction.as_number() {
            by_patient.entry(&e.patient).or_default().insert(&e.model, p);
        }
    }
    let mut rows = Vec::new();
    for (patient, preds) in by_patient {
        let Some(label) = cohort.ground_truth.get(patient).and_then(|l| l.get(&desc.id)) else { continue };
        let Some(y) = truth(desc, label) else { continue };
        rows.push((models.iter().map(|m| preds.get(m).copied().unwrap_or(0.0)).collect(), y));
    }
    rows
}

fn penalized_nll(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>) -> f64 {
    let z = x * beta;
    let mut nll = 0.0;
    for i in 0..z.len() {
        // log(1 + e^z) - y z, written to stay finite for large |z|.
        let zi = z[i];
        let softplus = if zi > 0.0 { zi + (-zi).exp().ln_1p() } else { zi.exp().ln_1p() };
        nll += softplus - y[i] * zi;
    }
    nll + 0.5 * LOGISTIC_RIDGE * beta.norm_squared()
}

/// Maximum-likelihood logistic regression by damped Newton steps from zero.
/// Returns `(bias, weights)`.
pub fn fit_logistic(rows: &[(Vec<f64>, bool)]) -> (f64, Vec<f64>) {
    let n = rows.len();
    let d = rows.first().map(|r| r.0.len()).unwrap_or(0) + 1;
    let x = DMatrix::from_fn(n, d, |i, j| if j == 0 { 1.0 } else { rows[i].0[j - 1] });
    let y = DVector::from_fn(n, |i, _| if rows[i].1 { 1.0 } else { 0.0 });
    let mut beta = DVector::zeros(d);
    let mut loss = penalized_nll(&x, &y, &beta);
    for _ in 0..LOGISTIC_MAX_ITER {
        let p = (&x * &beta).map(sigmoid);
        let grad = x.transpose() * (&p - &y) + LOGISTIC_RIDGE * &beta;
        let w = p.map(|pi| pi * (1.0 - pi));
        let mut h = x.transpose() * DMatrix::from_diagonal(&w) * &x;
        for k in 0..d {
            h[(k, k)] += LOGISTIC_RIDGE;
        }
        let Some(step) = h.clone().cholesky().map(|c| c.solve(&grad)).or_else(|| h.lu().solve(&grad)) else {
            break;
        };
        let mut t = 1.0;
        let mut next = &beta - &step * t;
        let mut next_loss = penalized_nll(&x, &y, &next);
        while next_loss > loss && t > 1e-10 {
            t *= 0.5;
            next = &beta - &step * t;
            next_loss = penalized_nll(&x, &y, &next);
        }
        let moved = (&next - &beta).amax();
        beta = next;
        loss = next_loss;
        if moved < LOGISTIC_TOLERANCE {
            break;
        }
    }
    (beta[0], beta.iter().skip(1).copied().collect())
}

/// Derives a new registry version with fusion weights learned from the cohort.
pub fn retrain(cohort: &DigitalCohort, registry: &Registry) -> Result<RetrainOutcome, BackboneError> {
    let mut changed = Vec::new();
    let mut diffs = Vec::new();
    for desc in registry.attributes().values() {
        let cfg = &desc.fusion;
        let models = registry.proposing_models(&desc.id);
        if models.is_empty() {
            continue;
        }
        if cfg.mode == FusionMode::LogisticFusion {
            let rows = logistic_rows(cohort, desc, &models);
            if rows.is_empty() {
                continue;
            }
            let (bias, weights) = fit_logistic(&rows);
            let old = cfg.logistic.clone().unwrap_or_default();
            diffs.push(WeightDiff { attribute: desc.id.clone(), parameter: "bias".into(), old: cfg.logistic.as_ref().map(|l| l.bias), new: bias });
            let mut params = LogisticFusionParams { bias, weights: BTreeMap::new() };
            for (m, w) in models.iter().zip(weights) {
                diffs.push(WeightDiff {
                    attribute: desc.id.clone(),
                    parameter: m.to_string(),
                    old: old.weights.get(*m).copied(),
                    new: w,
                });
                params.weights.insert(m.to_string(), w);
            }
            let mut d = desc.clone();
            d.fusion.logistic = Some(params);
            changed.push(d);
        } else if cfg.weighting_rule == WeightingRule::Accuracy {
            let seen = models.iter().any(|m| cohort_stats(cohort, m, &desc.id).n_evaluated > 0);
            if !seen {
                continue;
            }
            let mut weights = BTreeMap::new();
            for m in &models {
                let new = cohort_stats(cohort, m, &desc.id).smoothed_accuracy();
                let old = cfg.weights.as_ref().and_then(|w| w.get(*m)).copied();
                diffs.push(WeightDiff {
                    attribute: desc.id.clone(),
                    parameter: m.to_string(),
                    old: Some(old.unwrap_or(PRIOR_ACCURACY)),
                    new,
                });
                weights.insert(m.to_string(), new);
            }
            let mut d = desc.clone();
            d.fusion.weights = Some(weights);
            changed.push(d);
        }
    }
    if changed.is_empty() {
        return Err(BackboneError::InsufficientData(
            "no trainable fusion has labeled predictions in the cohort".into(),
        ));
    }
    let registry = registry.update(RegistryUpdate { attributes: changed, models: Vec::new() })?;
    Ok(RetrainOutcome { registry, weight_diffs: diffs })
}

// ---------------------------------------------------------------------------
// File store
// ---------------------------------------------------------------------------

pub struct Store {
    root: PathBuf,
    /// Serializes cohort and registry writers.
    writer: Mutex<()>,
}

fn valid_patient_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("store types serialize");
    bytes.push(b'\n');
    bytes
}

/// Write-to-temp, fsync, rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().expect("store paths have a parent");
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, BackboneError> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| BackboneError::Corrupt { path: path.display().to_string(), detail: e.to_string() })
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, BackboneError> {
        let root = root.into();
        for sub in ["patients", "cohort", "registry"] {
            fs::create_dir_all(root.join(sub))?;
        }
        Ok(Self { root, writer: Mutex::new(()) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, ()> {
        self.writer.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn registry_path(&self, version: u64) -> PathBuf {
        self.root.join("registry").join(format!("v{version}.json"))
    }

    fn record_path(&self, id: &str) -> PathBuf {
        self.root.join("patients").join(format!("{id}.json"))
    }

    fn runs_path(&self, id: &str) -> PathBuf {
        self.root.join("patients").join(format!("{id}.runs.jsonl"))
    }

    fn cohort_path(&self, name: &str) -> PathBuf {
        self.root.join("cohort").join(name)
    }

    /// Stores a registry version. Re-saving identical content is a no-op;
    /// versions are never overwritten.
    pub fn save_registry(&self, registry: &Registry) -> Result<(), BackboneError> {
        let _g = self.lock();
        self.save_registry_locked(registry)
    }

    fn save_registry_locked(&self, registry: &Registry) -> Result<(), BackboneError> {
        let path = self.registry_path(registry.version());
        let bytes = to_json_bytes(&registry.to_document());
        if path.exists() {
            return if fs::read(&path)? == bytes {
                Ok(())
            } else {
                Err(BackboneError::RegistryVersionExists(registry.version()))
            };
        }
        write_atomic(&path, &bytes)?;
        Ok(())
    }

    pub fn load_registry(&self, version: u64) -> Result<Registry, BackboneError> {
        let path = self.registry_path(version);
        if !path.exists() {
            return Err(BackboneError::MissingRegistry(version));
        }
        Ok(crate::registry::load_registry(&fs::read_to_string(path)?)?)
    }

    pub fn registry_versions(&self) -> Result<Vec<u64>, BackboneError> {
        let mut versions = Vec::new();
        for entry in fs::read_dir(self.root.join("registry"))? {
            let name = entry?.file_name();
            let name = name.to_string_lossy();
            if let Some(v) = name.strip_prefix('v').and_then(|s| s.strip_suffix(".json")).and_then(|s| s.parse().ok()) {
                versions.push(v);
            }
        }
        versions.sort_unstable();
        Ok(versions)
    }

    pub fn latest_registry(&self) -> Result<Option<Registry>, BackboneError> {
        match self.registry_versions()?.last() {
            Some(v) => Ok(Some(self.load_registry(*v)?)),
            None => Ok(None),
        }
    }

    pub fn patient_ids(&self) -> Result<Vec<String>, BackboneError> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(self.root.join("patients"))? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if let Some(id) = name.strip_suffix(".json") {
                ids.push(id.to_string());
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// Persists a fresh twin. Its registry version must already be stored.
    pub fn create_patient(&self, twin: &TwinState) -> Result<PatientRecord, BackboneError> {
        let id = &twin.patient_id;
        if !valid_patient_id(id) {
            return Err(BackboneError::InvalidPatientId(id.clone()));
        }
        if self.record_path(id).exists() {
            return Err(BackboneError::PatientExists(id.clone()));
        }
        if !self.registry_path(twin.graph.registry_version).exists() {
            return Err(BackboneError::MissingRegistry(twin.graph.registry_version));
        }
        let record = PatientRecord {
            patient_id: id.clone(),
            registry_version: twin.graph.registry_version,
            journey_status: JourneyStatus::Active,
            run_count: 0,
            last_event_seq: twin.event_seq,
            twin: twin.persisted(),
        };
        OpenOptions::new().create(true).append(true).open(self.runs_path(id))?;
        write_atomic(&self.record_path(id), &to_json_bytes(&record))?;
        Ok(record)
    }

    pub fn load_record(&self, id: &str) -> Result<PatientRecord, BackboneError> {
        if !valid_patient_id(id) {
            return Err(BackboneError::InvalidPatientId(id.to_string()));
        }
        let path = self.record_path(id);
        if !path.exists() {
            return Err(BackboneError::UnknownPatient(id.to_string()));
        }
        read_json(&path)
    }

    /// Record plus its twin, rebuilt on the registry version it was built with.
    pub fn load_twin(&self, id: &str) -> Result<(PatientRecord, TwinState), BackboneError> {
        let record = self.load_record(id)?;
        let registry = Arc::new(self.load_registry(record.registry_version)?);
        let twin = TwinState::restore(registry, record.twin.clone())?;
        Ok((record, twin))
    }

    /// Appends a run to the log, then rewrites the record. Durable on return.
    pub fn commit_run(
        &self,
        record: &mut PatientRecord,
        twin: &TwinState,
        report: &RunReport,
    ) -> Result<(), BackboneError> {
        if record.journey_status == JourneyStatus::Completed {
            return Err(BackboneError::JourneyCompleted(record.patient_id.clone()));
        }
        if report.ephemeral {
            return Err(BackboneError::EphemeralReport);
        }
        let expected = record.last_event_seq + 1;
        if report.event_seq != expected {
            return Err(BackboneError::EventSequenceGap { expected, found: report.event_seq });
        }
        let mut stored = report.clone();
        stored.wall_time_us = None;
        let mut line = serde_json::to_vec(&stored).expect("report serializes");
        line.push(b'\n');
        let mut log = OpenOptions::new().create(true).append(true).open(self.runs_path(&record.patient_id))?;
        log.write_all(&line)?;
        log.sync_data()?;

        record.run_count += 1;
        record.last_event_seq = report.event_seq;
        record.twin = twin.persisted();
        write_atomic(&self.record_path(&record.patient_id), &to_json_bytes(record))?;
        Ok(())
    }

    /// Persists a twin change that is not a run (model toggles).
    pub fn save_twin(&self, record: &mut PatientRecord, twin: &TwinState) -> Result<(), BackboneError> {
        if record.journey_status == JourneyStatus::Completed {
            return Err(BackboneError::JourneyCompleted(record.patient_id.clone()));
        }
        record.twin = twin.persisted();
        write_atomic(&self.record_path(&record.patient_id), &to_json_bytes(record))?;
        Ok(())
    }

    pub fn runs(&self, id: &str) -> Result<Vec<RunReport>, BackboneError> {
        self.load_record(id)?;
        let path = self.runs_path(id);
        let text = fs::read_to_string(&path)?;
        text.lines()
            .filter(|l| !l.is_empty())
            .map(|l| {
                serde_json::from_str(l)
                    .map_err(|e| BackboneError::Corrupt { path: path.display().to_string(), detail: e.to_string() })
            })
            .collect()
    }

    pub fn cohort(&self) -> Result<DigitalCohort, BackboneError> {
        let load = |name: &str| -> Result<Option<serde_json::Value>, BackboneError> {
            let path = self.cohort_path(name);
            if path.exists() { Ok(Some(read_json(&path)?)) } else { Ok(None) }
        };
        let corrupt = |name: &str, e: serde_json::Error| BackboneError::Corrupt {
            path: self.cohort_path(name).display().to_string(),
            detail: e.to_string(),
        };
        let mut cohort = DigitalCohort::default();
        if let Some(v) = load("ground_truth.json")? {
            cohort.ground_truth = serde_json::from_value(v).map_err(|e| corrupt("ground_truth.json", e))?;
        }
        if let Some(v) = load("performance.json")? {
            cohort.performance = serde_json::from_value(v).map_err(|e| corrupt("performance.json", e))?;
        }
        if let Some(v) = load("evaluations.json")? {
            cohort.evaluations = serde_json::from_value(v).map_err(|e| corrupt("evaluations.json", e))?;
        }
        Ok(cohort)
    }

    fn write_cohort(&self, cohort: &DigitalCohort) -> Result<(), BackboneError> {
        write_atomic(&self.cohort_path("evaluations.json"), &to_json_bytes(&cohort.evaluations))?;
        write_atomic(&self.cohort_path("performance.json"), &to_json_bytes(&cohort.performance))?;
        write_atomic(&self.cohort_path("ground_truth.json"), &to_json_bytes(&cohort.ground_truth))?;
        Ok(())
    }

    /// Freezes the record, stores its labels and scores every model
    /// prediction of a labeled attribute.
    pub fn complete_journey(
        &self,
        record: &mut PatientRecord,
        twin: &TwinState,
        labels: &BTreeMap<String, Value>,
    ) -> Result<DigitalCohort, BackboneError> {
        if record.journey_status == JourneyStatus::Completed {
            return Err(BackboneError::AlreadyCompleted(record.patient_id.clone()));
        }
        let registry = twin.registry();
        for (attr, label) in labels {
            let desc = registry.attribute(attr)?;
            label_conforms(label, desc)
                .map_err(|error| BackboneError::InvalidLabel { attribute: attr.clone(), error })?;
        }

        let _g = self.lock();
        let mut cohort = self.cohort()?;
        if cohort.ground_truth.contains_key(&record.patient_id) {
            return Err(BackboneError::AlreadyCompleted(record.patient_id.clone()));
        }
        for (attr, label) in labels {
            let desc = registry.attribute(attr)?;
            for (model, proposal) in &twin.states[attr].proposals {
                let Some(score) = score_prediction(desc, &proposal.value, label) else { continue };
                cohort.evaluations.push(Evaluation {
                    patient: record.patient_id.clone(),
                    model: model.clone(),
                    attribute: attr.clone(),
                    prediction: proposal.value.clone(),
                    label: label.clone(),
                    correct: score.correct,
                    sq_error: score.sq_error,
                });
                cohort.count(model, attr, score);
            }
        }
        cohort.ground_truth.insert(record.patient_id.clone(), labels.clone());
        self.write_cohort(&cohort)?;

        record.journey_status = JourneyStatus::Completed;
        record.twin = twin.persisted();
        write_atomic(&self.record_path(&record.patient_id), &to_json_bytes(record))?;
        Ok(cohort)
    }

    /// Retrains against the latest stored registry and stores the result as
    /// the next version. Older versions stay in place.
    pub fn retrain(&self) -> Result<RetrainOutcome, BackboneError> {
        let _g = self.lock();
        let latest = self.registry_versions()?.last().copied().ok_or(BackboneError::MissingRegistry(0))?;
        let registry = self.load_registry(latest)?;
        let cohort = self.cohort()?;
        let outcome = retrain(&cohort, &registry)?;
        self.save_registry_locked(&outcome.registry)?;
        Ok(outcome)
    }
}
