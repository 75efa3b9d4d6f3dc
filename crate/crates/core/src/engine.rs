//! Operational mode: external events pin attributes and propagate through the
//! graph until no attribute changes any more.
//!
//! Work items are processed in order of (graph level, arrival, id). On acyclic
//! graphs this is a topological order, so every fusion sees all proposals of
//! the run before it signs. Inside a cycle all nodes share a level and the
//! order degrades to plain FIFO, which keeps loop cuts reproducible.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::time::Instant;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::builder::{GraphSnapshot, TwinState};
use crate::fusion::{fuse, fuse_overwrite, model_impact, FusionError, FusionOutcome, Impact};
use crate::registry::{ConflictPolicy, EvalError, RegistryError};
use crate::types::{
    survival_at_horizon, AttributeState, AttributeStatus, ProvenanceChain, Proposal, Signature, Value, ValueError,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalEvent {
    pub attribute: String,
    pub value: Value,
    #[serde(alias = "t")]
    pub timestamp: DateTime<Utc>,
    #[serde(default)]
    pub source: String,
}

impl ExternalEvent {
    pub fn new(attribute: impl Into<String>, value: Value, timestamp: DateTime<Utc>, source: impl Into<String>) -> Self {
        Self { attribute: attribute.into(), value, timestamp, source: source.into() }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("invalid value for {attribute:?}: {error}")]
    InvalidValue { attribute: String, error: ValueError },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSummary {
    pub attribute: String,
    pub source: String,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiredModel {
    pub model: String,
    pub outputs: Vec<String>,
}

/// A proposal rejected because its chain already carried the fusion's signature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopCut {
    pub fusion: String,
    pub source: String,
}

/// A proposal that did not take effect in this run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetAside {
    pub attribute: String,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictRecord {
    pub attribute: String,
    pub detail: String,
    pub models: Vec<String>,
    pub policy: ConflictPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalFailure {
    pub model: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub attribute: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon_days: Option<u32>,
    pub outcome: FusionOutcome,
    /// Scalar reading of the outcome: the probability itself, or survival at
    /// the horizon.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probability: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub event_seq: u64,
    pub events: Vec<EventSummary>,
    #[serde(default)]
    pub ephemeral: bool,
    pub fired_models: Vec<FiredModel>,
    pub fusion_outcomes: BTreeMap<String, FusionOutcome>,
    pub loop_cuts: Vec<LoopCut>,
    /// Proposals dropped because the attribute is pinned by an external value.
    pub discarded: Vec<SetAside>,
    /// Proposals stored after the attribute's fusion already signed this run.
    pub deferred: Vec<SetAside>,
    pub conflicts: Vec<ConflictRecord>,
    pub failures: Vec<EvalFailure>,
    pub changed_attributes: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<QueryResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_us: Option<u64>,
}

impl RunReport {
    fn empty(event_seq: u64) -> Self {
        Self {
            event_seq,
            events: Vec::new(),
            ephemeral: false,
            fired_models: Vec::new(),
            fusion_outcomes: BTreeMap::new(),
            loop_cuts: Vec::new(),
            discarded: Vec::new(),
            deferred: Vec::new(),
            conflicts: Vec::new(),
            failures: Vec::new(),
            changed_attributes: BTreeSet::new(),
            query: None,
            wall_time_us: None,
        }
    }

    /// Folds a later run into this one (what-if scenarios with several overrides).
    fn absorb(&mut self, other: RunReport) {
        self.event_seq = other.event_seq;
        self.events.extend(other.events);
        self.fired_models.extend(other.fired_models);
        self.fusion_outcomes.extend(other.fusion_outcomes);
        self.loop_cuts.extend(other.loop_cuts);
        self.discarded.extend(other.discarded);
        self.deferred.extend(other.deferred);
        self.conflicts.extend(other.conflicts);
        self.failures.extend(other.failures);
        self.changed_attributes.extend(other.changed_attributes);
        self.wall_time_us = match (self.wall_time_us, other.wall_time_us) {
            (Some(a), Some(b)) => Some(a + b),
            (a, b) => a.or(b),
        };
    }

    pub fn fired_order(&self) -> Vec<&str> {
        self.fired_models.iter().map(|f| f.model.as_str()).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EngineOptions {
    /// Evaluate same-level models on worker threads. Ignored on cyclic graphs.
    pub concurrent: bool,
    /// Survival query horizon per attribute, overriding the registry default.
    pub horizons: BTreeMap<String, u32>,
    /// Fill `wall_time_us`. Off by default so reports are reproducible.
    pub measure_time: bool,
}

pub fn ingest(twin: &mut TwinState, event: ExternalEvent) -> Result<RunReport, EngineError> {
    ingest_with(twin, event, &EngineOptions::default())
}

/// Several simultaneous events: one run each, in ascending attribute id.
pub fn ingest_batch(twin: &mut TwinState, mut events: Vec<ExternalEvent>) -> Result<Vec<RunReport>, EngineError> {
    events.sort_by(|a, b| a.attribute.cmp(&b.attribute));
    for e in &events {
        check_event(twin, e)?;
    }
    events.into_iter().map(|e| ingest(twin, e)).collect()
}

fn check_event(twin: &TwinState, event: &ExternalEvent) -> Result<FusionOutcome, EngineError> {
    let desc = twin.registry().attribute(&event.attribute)?;
    fuse_overwrite(&event.value, desc, &Signature::fusion(&event.attribute)).map_err(|e| match e {
        FusionError::Value(error) => EngineError::InvalidValue { attribute: event.attribute.clone(), error },
        other => EngineError::InvalidValue {
            attribute: event.attribute.clone(),
            error: ValueError::Malformed(other.to_string()),
        },
    })
}

pub fn ingest_with(twin: &mut TwinState, event: ExternalEvent, options: &EngineOptions) -> Result<RunReport, EngineError> {
    let pinned = check_event(twin, &event)?;
    let started = Instant::now();
    twin.event_seq += 1;
    let seq = twin.event_seq;
    let mut run = Run::new(twin, seq, event.timestamp, options);
    run.report.events.push(EventSummary {
        attribute: event.attribute.clone(),
        source: event.source.clone(),
        timestamp: event.timestamp,
    });

    let FusionOutcome::ExternalPinned { value, provenance } = &pinned else { unreachable!() };
    let st = run.twin.states.get_mut(&event.attribute).expect("checked");
    st.proposals.clear();
    st.record(value.clone(), AttributeStatus::Measured, provenance.clone(), seq, event.timestamp);
    run.report.fusion_outcomes.insert(event.attribute.clone(), pinned);
    run.report.changed_attributes.insert(event.attribute.clone());
    run.signed.insert(event.attribute.clone());
    run.propagate(&event.attribute);
    run.seed_sources();
    run.drain();

    let mut report = run.report;
    if options.measure_time {
        report.wall_time_us = Some(started.elapsed().as_micros() as u64);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Item {
    Model(String),
    Fusion(String),
}

struct Run<'a> {
    twin: &'a mut TwinState,
    seq: u64,
    timestamp: DateTime<Utc>,
    options: &'a EngineOptions,
    concurrent: bool,
    queue: BinaryHeap<Reverse<(usize, u64, Item)>>,
    tick: u64,
    queued_models: BTreeSet<String>,
    fired: BTreeSet<String>,
    pending_fusions: BTreeSet<String>,
    /// Attributes whose fusion has already propagated in this run.
    signed: BTreeSet<String>,
    report: RunReport,
}

impl<'a> Run<'a> {
    fn new(twin: &'a mut TwinState, seq: u64, timestamp: DateTime<Utc>, options: &'a EngineOptions) -> Self {
        let concurrent = options.concurrent && twin.graph.is_acyclic();
        Self {
            twin,
            seq,
            timestamp,
            options,
            concurrent,
            queue: BinaryHeap::new(),
            tick: 0,
            queued_models: BTreeSet::new(),
            fired: BTreeSet::new(),
            pending_fusions: BTreeSet::new(),
            signed: BTreeSet::new(),
            report: RunReport::empty(seq),
        }
    }

    fn push(&mut self, level: usize, item: Item) {
        self.tick += 1;
        self.queue.push(Reverse((level, self.tick, item)));
    }

    fn enqueue_model(&mut self, model: &str) {
        if self.fired.contains(model) || self.queued_models.contains(model) || !self.twin.is_enabled(model) {
            return;
        }
        self.queued_models.insert(model.to_string());
        let level = self.twin.graph.models[model].level;
        self.push(level, Item::Model(model.to_string()));
    }

    fn propagate(&mut self, attr: &str) {
        let consumers = self.twin.graph.informed[attr].clone();
        for m in consumers {
            self.enqueue_model(&m);
        }
    }

    /// Models without inputs have nothing to wait for; they run every time.
    fn seed_sources(&mut self) {
        let sources: Vec<String> = self
            .twin
            .registry()
            .models()
            .values()
            .filter(|m| m.inputs.is_empty() && m.kind != crate::registry::ModelKind::ExternalInput)
            .map(|m| m.id.clone())
            .collect();
        for m in sources {
            self.enqueue_model(&m);
        }
    }

    fn drain(&mut self) {
        while let Some(Reverse((level, _, item))) = self.queue.pop() {
            match item {
                Item::Fusion(attr) => self.process_fusion(&attr),
                Item::Model(m) => {
                    let mut batch = vec![m];
                    if self.concurrent {
                        while let Some(Reverse((l, _, Item::Model(_)))) = self.queue.peek() {
                            if *l != level {
                                break;
                            }
                            let Some(Reverse((_, _, Item::Model(next)))) = self.queue.pop() else { unreachable!() };
                            batch.push(next);
                        }
                    }
                    self.fire_batch(batch);
                }
            }
        }
    }

    fn gather_inputs(&self, model: &str) -> (BTreeMap<String, Value>, ProvenanceChain) {
        let desc = self.twin.registry().model(model).expect("graph mirrors registry");
        let mut inputs = BTreeMap::new();
        let mut chain = ProvenanceChain::new();
        for attr in desc.input_ids() {
            let st = &self.twin.states[attr];
            if let (true, Some(v)) = (st.is_available(), &st.consensus) {
                inputs.insert(attr.to_string(), v.clone());
                chain.extend_from(&st.provenance);
            }
        }
        (inputs, chain)
    }

    fn fire_batch(&mut self, batch: Vec<String>) {
        let mut ready = Vec::new();
        for m in batch {
            self.queued_models.remove(&m);
            if self.fired.contains(&m) || !self.twin.is_enabled(&m) || !self.twin.inputs_ready(&m) {
                continue;
            }
            self.fired.insert(m.clone());
            let (inputs, chain) = self.gather_inputs(&m);
            ready.push((m, inputs, chain));
        }
        let registry = self.twin.registry().clone();
        let results: Vec<Result<BTreeMap<String, Value>, EvalError>> = if ready.len() > 1 {
            std::thread::scope(|s| {
                let handles: Vec<_> = ready
                    .iter()
                    .map(|(m, inputs, _)| {
                        let registry = &registry;
                        s.spawn(move || registry.evaluate_model(m, inputs))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("evaluator thread panicked")).collect()
            })
        } else {
            ready.iter().map(|(m, inputs, _)| registry.evaluate_model(m, inputs)).collect()
        };
        for ((m, _, chain), result) in ready.into_iter().zip(results) {
            match result {
                Ok(outputs) => self.deliver(&m, outputs, &chain),
                Err(e) => self.report.failures.push(EvalFailure { model: m, error: e.to_string() }),
            }
        }
    }

    fn deliver(&mut self, model: &str, outputs: BTreeMap<String, Value>, inputs_chain: &ProvenanceChain) {
        self.report.fired_models.push(FiredModel { model: model.to_string(), outputs: outputs.keys().cloned().collect() });
        for (attr, value) in outputs {
            let proposal = Proposal::new(model, &attr, value, inputs_chain.clone(), self.seq);
            let st = self.twin.states.get_mut(&attr).expect("validated output");
            if st.is_pinned() {
                self.report.discarded.push(SetAside { attribute: attr, source: model.to_string() });
                continue;
            }
            if proposal.provenance.contains(&Signature::fusion(&attr)) {
                self.report.loop_cuts.push(LoopCut { fusion: attr, source: model.to_string() });
                continue;
            }
            st.proposals.insert(model.to_string(), proposal);
            if self.signed.contains(&attr) {
                self.report.deferred.push(SetAside { attribute: attr, source: model.to_string() });
                continue;
            }
            if self.pending_fusions.insert(attr.clone()) {
                let level = self.twin.graph.attribute_levels[&attr];
                self.push(level, Item::Fusion(attr));
            }
        }
    }

    fn process_fusion(&mut self, attr: &str) {
        self.pending_fusions.remove(attr);
        if self.signed.contains(attr) || self.twin.states[attr].is_pinned() {
            return;
        }
        let desc = self.twin.registry().attribute(attr).expect("graph mirrors registry").clone();
        let st = &self.twin.states[attr];
        let proposals: Vec<&Proposal> = st.proposals.values().filter(|p| self.twin.is_enabled(&p.source.id)).collect();
        let involved: Vec<String> = proposals.iter().map(|p| p.source.id.clone()).collect();
        let outcome = match fuse(&desc, &proposals, self.options.horizons.get(attr).copied()) {
            Ok(o) => o,
            Err(e) => FusionOutcome::Conflict {
                detail: e.to_string(),
                models: involved,
                policy: desc.fusion.conflict_policy,
                values: proposals.iter().map(|p| (p.source.id.clone(), p.value.clone())).collect(),
            },
        };
        match &outcome {
            FusionOutcome::Fused { value, provenance, .. } => {
                let changed = match &st.consensus {
                    None => true,
                    Some(old) => !old.approx_eq(value) || !st.provenance.same_set(provenance),
                };
                if changed {
                    let (value, provenance) = (value.clone(), provenance.clone());
                    let st = self.twin.states.get_mut(attr).expect("exists");
                    st.record(value, AttributeStatus::Predicted, provenance, self.seq, self.timestamp);
                    self.report.changed_attributes.insert(attr.to_string());
                    self.signed.insert(attr.to_string());
                    self.propagate(attr);
                }
            }
            FusionOutcome::Conflict { detail, models, policy, .. } => {
                self.report.conflicts.push(ConflictRecord {
                    attribute: attr.to_string(),
                    detail: detail.clone(),
                    models: models.clone(),
                    policy: *policy,
                });
            }
            FusionOutcome::ExternalPinned { .. } | FusionOutcome::NoInput => {}
        }
        self.report.fusion_outcomes.insert(attr.to_string(), outcome);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WhatIfQuery {
    pub attribute: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon_days: Option<u32>,
}

/// Runs `overrides` on a copy of the twin; the twin itself is never touched.
pub fn what_if(
    twin: &TwinState,
    overrides: Vec<ExternalEvent>,
    query: Option<&WhatIfQuery>,
) -> Result<(GraphSnapshot, RunReport), EngineError> {
    let mut options = EngineOptions::default();
    if let Some(q) = query {
        twin.registry().attribute(&q.attribute)?;
        if let Some(h) = q.horizon_days {
            options.horizons.insert(q.attribute.clone(), h);
        }
    }
    let mut scratch = twin.clone();
    let mut overrides = overrides;
    overrides.sort_by(|a, b| a.attribute.cmp(&b.attribute));
    for e in &overrides {
        check_event(&scratch, e)?;
    }
    let mut report = RunReport::empty(scratch.event_seq);
    for e in overrides {
        let r = ingest_with(&mut scratch, e, &options)?;
        report.absorb(r);
    }
    report.ephemeral = true;
    if let Some(q) = query {
        report.query = Some(evaluate_query(&scratch, q)?);
    }
    Ok((scratch.snapshot(), report))
}

fn evaluate_query(twin: &TwinState, q: &WhatIfQuery) -> Result<QueryResult, EngineError> {
    let desc = twin.registry().attribute(&q.attribute)?;
    let st = twin.state(&q.attribute)?;
    let horizon = q.horizon_days.or(desc.fusion.horizon_days);
    let outcome = if st.is_pinned() {
        FusionOutcome::ExternalPinned {
            value: st.consensus.clone().expect("pinned has a value"),
            provenance: st.provenance.clone(),
        }
    } else {
        let proposals: Vec<&Proposal> = st.proposals.values().filter(|p| twin.is_enabled(&p.source.id)).collect();
        match fuse(desc, &proposals, horizon) {
            Ok(o) => o,
            Err(e) => FusionOutcome::Conflict {
                detail: e.to_string(),
                models: proposals.iter().map(|p| p.source.id.clone()).collect(),
                policy: desc.fusion.conflict_policy,
                values: proposals.iter().map(|p| (p.source.id.clone(), p.value.clone())).collect(),
            },
        }
    };
    let probability = match &outcome {
        FusionOutcome::Fused { value, .. } | FusionOutcome::ExternalPinned { value, .. } => match value {
            Value::Probability { value } => Some(*value),
            Value::SurvivalCurve { .. } | Value::TimeToEventDensity { .. } => {
                horizon.and_then(|h| survival_at_horizon(value, h).ok())
            }
            _ => None,
        },
        _ => None,
    };
    Ok(QueryResult { attribute: q.attribute.clone(), horizon_days: horizon, outcome, probability })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImpactSummary {
    /// The value is an external input; model proposals were discarded.
    External,
    Models { models: BTreeMap<String, Impact> },
    Unavailable { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeReport {
    pub attribute: String,
    pub state: AttributeState,
    pub impact: ImpactSummary,
    pub provenance: ProvenanceChain,
}

pub fn attribute_report(twin: &TwinState, attr: &str) -> Result<AttributeReport, EngineError> {
    let desc = twin.registry().attribute(attr)?;
    let st = twin.state(attr)?;
    let impact = if st.is_pinned() {
        ImpactSummary::External
    } else {
        let proposals: Vec<&Proposal> = st.proposals.values().filter(|p| twin.is_enabled(&p.source.id)).collect();
        if proposals.is_empty() {
            ImpactSummary::Models { models: BTreeMap::new() }
        } else {
            match model_impact(desc, &proposals, None) {
                Ok(models) => ImpactSummary::Models { models },
                Err(e) => ImpactSummary::Unavailable { reason: e.to_string() },
            }
        }
    };
    Ok(AttributeReport { attribute: attr.to_string(), state: st.clone(), impact, provenance: st.provenance.clone() })
}
