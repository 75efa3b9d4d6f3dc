//! Fusion modes: each attribute's unique aggregator turning the latest
//! proposals of its informing models into one consensus value.
//!
//! All functions are pure. Proposals are always visited in ascending source id
//! so that floating-point sums do not depend on arrival order.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::registry::{
    sigmoid, AttributeDescriptor, ConflictPolicy, FusionConfig, FusionMode, LogisticFusionParams, WeightingRule,
};
use crate::types::{survival_at_horizon, ProvenanceChain, Proposal, Signature, Value, ValueError, ValueKind, TOLERANCE};

/// Smoothed accuracy assumed for a model that has never been evaluated.
pub const PRIOR_ACCURACY: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FusionError {
    #[error("all available weights are zero")]
    AllWeightsZero,
    #[error("proposals mix value kinds")]
    MixedValueKinds,
    #[error("categorical proposals use different label sets")]
    MixedLabelSets,
    #[error("no survival proposal is at least as fine as the {0}-day query horizon")]
    NoAggregators(u32),
    #[error("logistic fusion has no trained parameters")]
    UntrainedFusion,
    #[error("survival fusion needs a query horizon")]
    MissingHorizon,
    #[error(transparent)]
    Value(#[from] ValueError),
}

/// Which survival proposals built a fused value and which only checked it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalDetail {
    pub horizon_days: u32,
    pub aggregators: Vec<String>,
    pub verifiers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum FusionOutcome {
    Fused {
        value: Value,
        provenance: ProvenanceChain,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        survival: Option<SurvivalDetail>,
    },
    ExternalPinned {
        value: Value,
        provenance: ProvenanceChain,
    },
    Conflict {
        detail: String,
        models: Vec<String>,
        policy: ConflictPolicy,
        /// Every value involved, handed back for a human decision.
        values: BTreeMap<String, Value>,
    },
    NoInput,
}

impl FusionOutcome {
    pub fn fused_value(&self) -> Option<&Value> {
        match self {
            FusionOutcome::Fused { value, .. } => Some(value),
            _ => None,
        }
    }

    pub fn is_conflict(&self) -> bool {
        matches!(self, FusionOutcome::Conflict { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPerformance {
    pub model: String,
    pub attribute: String,
    pub n_evaluated: u64,
    pub n_correct: u64,
    /// Only meaningful for continuous attributes.
    #[serde(default)]
    pub sum_sq_error: f64,
}

impl ModelPerformance {
    pub fn new(model: impl Into<String>, attribute: impl Into<String>) -> Self {
        Self { model: model.into(), attribute: attribute.into(), n_evaluated: 0, n_correct: 0, sum_sq_error: 0.0 }
    }

    /// Raw hit rate; zero when never evaluated.
    pub fn accuracy(&self) -> f64 {
        if self.n_evaluated == 0 {
            0.0
        } else {
            self.n_correct as f64 / self.n_evaluated as f64
        }
    }

    /// Laplace-smoothed accuracy `(n_correct + 1) / (n_evaluated + 2)`.
    pub fn smoothed_accuracy(&self) -> f64 {
        (self.n_correct as f64 + 1.0) / (self.n_evaluated as f64 + 2.0)
    }
}

pub fn renormalize_weights(
    weights: &BTreeMap<String, f64>,
    available: &BTreeSet<String>,
) -> Result<BTreeMap<String, f64>, FusionError> {
    let kept: BTreeMap<String, f64> = available
        .iter()
        .map(|m| (m.clone(), weights.get(m).copied().unwrap_or(0.0).max(0.0)))
        .collect();
    let total: f64 = kept.values().sum();
    if !(total > 0.0) {
        return Err(FusionError::AllWeightsZero);
    }
    Ok(kept.into_iter().map(|(m, w)| (m, w / total)).collect())
}

/// Binary entropy in bits.
pub fn binary_entropy(p: f64) -> f64 {
    let term = |x: f64| if x <= 0.0 { 0.0 } else { -x * x.log2() };
    term(p) + term(1.0 - p)
}

/// Raw (unnormalized) weight for each proposing model under `cfg`.
///
/// Accuracy-weighted fusions read the smoothed accuracies that retraining
/// writes into `cfg.weights`; models absent there get the prior.
pub fn raw_weights(cfg: &FusionConfig, proposals: &[&Proposal]) -> Result<BTreeMap<String, f64>, FusionError> {
    let mut out = BTreeMap::new();
    for p in proposals {
        let id = &p.source.id;
        let w = match cfg.weighting_rule {
            WeightingRule::Static => cfg.weights.as_ref().and_then(|w| w.get(id)).copied().unwrap_or(0.0),
            WeightingRule::Accuracy => {
                cfg.weights.as_ref().and_then(|w| w.get(id)).copied().unwrap_or(PRIOR_ACCURACY)
            }
            WeightingRule::Entropy => match p.value {
                Value::Probability { value } => 1.0 - binary_entropy(value),
                _ => return Err(FusionError::MixedValueKinds),
            },
        };
        out.insert(id.clone(), w);
    }
    // Uninformative predictions only: fall back to equal weights rather than
    // refusing to fuse.
    if cfg.weighting_rule == WeightingRule::Entropy && out.values().all(|w| *w <= 0.0) {
        out.values_mut().for_each(|w| *w = 1.0);
    }
    Ok(out)
}

fn sorted<'a>(proposals: impl IntoIterator<Item = &'a Proposal>) -> Vec<&'a Proposal> {
    let mut v: Vec<&Proposal> = proposals.into_iter().collect();
    v.sort_by(|a, b| a.source.id.cmp(&b.source.id));
    v
}

/// Union of proposal chains (in source-id order) plus the fusion's signature.
fn signed_chain(proposals: &[&Proposal], fusion_sig: &Signature) -> ProvenanceChain {
    let mut chain = ProvenanceChain::new();
    for p in proposals {
        chain.extend_from(&p.provenance);
    }
    chain.push(fusion_sig.clone());
    chain
}

fn values_of(proposals: &[&Proposal]) -> BTreeMap<String, Value> {
    proposals.iter().map(|p| (p.source.id.clone(), p.value.clone())).collect()
}

pub fn fuse_weighted_average(
    proposals: &[&Proposal],
    weights: &BTreeMap<String, f64>,
    fusion_sig: &Signature,
) -> Result<FusionOutcome, FusionError> {
    let proposals = sorted(proposals.iter().copied());
    let Some(first) = proposals.first() else {
        return Ok(FusionOutcome::NoInput);
    };
    let kind = first.value.kind();
    if !matches!(kind, ValueKind::Continuous | ValueKind::Probability)
        || proposals.iter().any(|p| p.value.kind() != kind)
    {
        return Err(FusionError::MixedValueKinds);
    }
    let provenance = signed_chain(&proposals, fusion_sig);
    if proposals.len() == 1 {
        return Ok(FusionOutcome::Fused { value: first.value.clone(), provenance, survival: None });
    }
    let available: BTreeSet<String> = proposals.iter().map(|p| p.source.id.clone()).collect();
    let w = renormalize_weights(weights, &available)?;
    let x: f64 = proposals.iter().map(|p| w[&p.source.id] * p.value.as_number().unwrap_or(0.0)).sum();
    let value = match kind {
        ValueKind::Probability => Value::probability(x.clamp(0.0, 1.0)),
        _ => Value::continuous(x),
    };
    Ok(FusionOutcome::Fused { value, provenance, survival: None })
}

fn ballot(value: &Value) -> Result<String, FusionError> {
    match value {
        Value::Boolean { value } => Ok(value.to_string()),
        Value::Categorical { .. } => Ok(value.argmax_label().unwrap_or_default().to_string()),
        _ => Err(FusionError::MixedValueKinds),
    }
}

/// Weighted plurality over argmax labels. Ties are never broken at random.
pub fn fuse_majority_vote(
    proposals: &[&Proposal],
    weights: Option<&BTreeMap<String, f64>>,
    policy: ConflictPolicy,
    fusion_sig: &Signature,
) -> Result<FusionOutcome, FusionError> {
    let proposals = sorted(proposals.iter().copied());
    let Some(first) = proposals.first() else {
        return Ok(FusionOutcome::NoInput);
    };
    let kind = first.value.kind();
    if proposals.iter().any(|p| p.value.kind() != kind) {
        return Err(FusionError::MixedValueKinds);
    }
    let label_set = |v: &Value| match v {
        Value::Categorical { probs } => probs.keys().cloned().collect::<BTreeSet<_>>(),
        _ => BTreeSet::new(),
    };
    let labels = label_set(&first.value);
    if proposals.iter().any(|p| label_set(&p.value) != labels) {
        return Err(FusionError::MixedLabelSets);
    }

    let mut tally: BTreeMap<String, f64> = BTreeMap::new();
    let mut voters: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for p in &proposals {
        let b = ballot(&p.value)?;
        let w = weights.and_then(|w| w.get(&p.source.id)).copied().unwrap_or(1.0);
        *tally.entry(b.clone()).or_default() += w;
        voters.entry(b).or_default().push(p.source.id.clone());
    }
    let top = tally.values().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scale = top.abs().max(f64::MIN_POSITIVE);
    let winners: Vec<&String> =
        tally.iter().filter(|(_, v)| (top - **v) <= TOLERANCE * scale).map(|(k, _)| k).collect();
    if winners.len() > 1 {
        let models: Vec<String> = winners.iter().flat_map(|w| voters[*w].clone()).collect();
        let mut models = models;
        models.sort();
        return Ok(FusionOutcome::Conflict {
            detail: format!("tied vote between {}", winners.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")),
            models,
            policy,
            values: values_of(&proposals),
        });
    }
    let winner = winners[0];
    let value = match kind {
        ValueKind::Boolean => Value::boolean(winner == "true"),
        _ => Value::label(winner, labels.iter().map(String::as_str)),
    };
    Ok(FusionOutcome::Fused { value, provenance: signed_chain(&proposals, fusion_sig), survival: None })
}

/// External input pins the attribute; only the fusion's own signature remains.
pub fn fuse_overwrite(
    external: &Value,
    descriptor: &AttributeDescriptor,
    fusion_sig: &Signature,
) -> Result<FusionOutcome, FusionError> {
    crate::registry::value_conforms(external, descriptor)?;
    Ok(FusionOutcome::ExternalPinned {
        value: external.clone(),
        provenance: ProvenanceChain::single(fusion_sig.clone()),
    })
}

/// Earliest time point a survival proposal reports; densities are daily.
fn granularity(value: &Value) -> Result<u32, FusionError> {
    match value {
        Value::TimeToEventDensity { .. } => Ok(0),
        Value::SurvivalCurve { points } => {
            Ok(points.first().map(|(h, _)| *h).ok_or_else(|| ValueError::Malformed("empty curve".into()))?)
        }
        other => Err(FusionError::Value(ValueError::TypeMismatch {
            expected: "survival_curve or time_to_event_density".into(),
            found: other.kind().to_string(),
        })),
    }
}

/// Harmonizes survival reports at `horizon`.
///
/// Proposals reporting at or below the horizon are averaged; coarser curves
/// only verify, since a later survival estimate must never exceed the fused
/// earlier one.
pub fn fuse_survival(
    proposals: &[&Proposal],
    weights: &BTreeMap<String, f64>,
    horizon: u32,
    policy: ConflictPolicy,
    fusion_sig: &Signature,
) -> Result<FusionOutcome, FusionError> {
    let proposals = sorted(proposals.iter().copied());
    if proposals.is_empty() {
        return Ok(FusionOutcome::NoInput);
    }
    let mut aggregators = Vec::new();
    let mut verifiers = Vec::new();
    for p in &proposals {
        if granularity(&p.value)? <= horizon {
            aggregators.push(*p);
        } else {
            verifiers.push(*p);
        }
    }
    if aggregators.is_empty() {
        return Err(FusionError::NoAggregators(horizon));
    }
    let available: BTreeSet<String> = aggregators.iter().map(|p| p.source.id.clone()).collect();
    let w = if aggregators.len() == 1 {
        available.iter().map(|m| (m.clone(), 1.0)).collect()
    } else {
        renormalize_weights(weights, &available)?
    };
    let mut fused = 0.0;
    for p in &aggregators {
        fused += w[&p.source.id] * survival_at_horizon(&p.value, horizon)?;
    }
    let fused = fused.clamp(0.0, 1.0);

    let mut violators = Vec::new();
    for v in &verifiers {
        let own = granularity(&v.value)?;
        if survival_at_horizon(&v.value, own)? > fused + TOLERANCE {
            violators.push(v.source.id.clone());
        }
    }
    if !violators.is_empty() {
        let mut models: Vec<String> = aggregators.iter().map(|p| p.source.id.clone()).collect();
        models.extend(violators.iter().cloned());
        models.sort();
        return Ok(FusionOutcome::Conflict {
            detail: format!(
                "survival at {horizon} days is {fused:.6}, but {} report(s) a higher survival later",
                violators.join(", ")
            ),
            models,
            policy,
            values: values_of(&proposals),
        });
    }
    Ok(FusionOutcome::Fused {
        value: Value::curve(vec![(horizon, fused)]),
        provenance: signed_chain(&proposals, fusion_sig),
        survival: Some(SurvivalDetail {
            horizon_days: horizon,
            aggregators: aggregators.iter().map(|p| p.source.id.clone()).collect(),
            verifiers: verifiers.iter().map(|p| p.source.id.clone()).collect(),
        }),
    })
}

/// `σ(b + Σ wᵢvᵢ)` over present proposals; absent models simply drop out.
pub fn fuse_logistic(
    proposals: &[&Proposal],
    params: Option<&LogisticFusionParams>,
    fusion_sig: &Signature,
) -> Result<FusionOutcome, FusionError> {
    let proposals = sorted(proposals.iter().copied());
    if proposals.is_empty() {
        return Ok(FusionOutcome::NoInput);
    }
    let params = params.ok_or(FusionError::UntrainedFusion)?;
    let mut z = params.bias;
    for p in &proposals {
        let Value::Probability { value } = p.value else {
            return Err(FusionError::MixedValueKinds);
        };
        z += params.weights.get(&p.source.id).copied().unwrap_or(0.0) * value;
    }
    Ok(FusionOutcome::Fused {
        value: Value::probability(sigmoid(z)),
        provenance: signed_chain(&proposals, fusion_sig),
        survival: None,
    })
}

/// Dispatches on the attribute's fusion mode. `horizon` overrides the
/// configured survival query horizon.
pub fn fuse(
    descriptor: &AttributeDescriptor,
    proposals: &[&Proposal],
    horizon: Option<u32>,
) -> Result<FusionOutcome, FusionError> {
    let cfg = &descriptor.fusion;
    let sig = Signature::fusion(&descriptor.id);
    if proposals.is_empty() {
        return Ok(FusionOutcome::NoInput);
    }
    match cfg.mode {
        FusionMode::WeightedAverage => fuse_weighted_average(proposals, &raw_weights(cfg, proposals)?, &sig),
        FusionMode::MajorityVote => {
            let w = raw_weights(cfg, proposals)?;
            let w = (cfg.weights.is_some() || cfg.weighting_rule != WeightingRule::Static).then_some(&w);
            fuse_majority_vote(proposals, w, cfg.conflict_policy, &sig)
        }
        FusionMode::SurvivalAggregate => {
            let h = horizon.or(cfg.horizon_days).ok_or(FusionError::MissingHorizon)?;
            fuse_survival(proposals, &raw_weights(cfg, proposals)?, h, cfg.conflict_policy, &sig)
        }
        FusionMode::LogisticFusion => fuse_logistic(proposals, cfg.logistic.as_ref(), &sig),
        FusionMode::Overwrite => fuse_unpinned_overwrite(descriptor, proposals, horizon, &sig),
    }
}

/// Overwrite-mode attribute with no external value yet: the models still
/// have to agree on something, so fall back to plain aggregation.
fn fuse_unpinned_overwrite(
    descriptor: &AttributeDescriptor,
    proposals: &[&Proposal],
    horizon: Option<u32>,
    sig: &Signature,
) -> Result<FusionOutcome, FusionError> {
    let cfg = &descriptor.fusion;
    let equal: BTreeMap<String, f64> = proposals.iter().map(|p| (p.source.id.clone(), 1.0)).collect();
    let w = cfg.weights.clone().unwrap_or(equal);
    match descriptor.value_kind {
        ValueKind::Continuous | ValueKind::Probability => fuse_weighted_average(proposals, &w, sig),
        ValueKind::Categorical | ValueKind::Boolean => {
            fuse_majority_vote(proposals, cfg.weights.as_ref(), cfg.conflict_policy, sig)
        }
        ValueKind::SurvivalCurve | ValueKind::TimeToEventDensity => {
            if proposals.len() == 1 {
                let p = proposals[0];
                return Ok(FusionOutcome::Fused {
                    value: p.value.clone(),
                    provenance: signed_chain(&[p], sig),
                    survival: None,
                });
            }
            match horizon {
                Some(h) => fuse_survival(proposals, &w, h, cfg.conflict_policy, sig),
                None => Ok(FusionOutcome::Conflict {
                    detail: "several survival reports and no horizon to harmonize them at".into(),
                    models: sorted(proposals.iter().copied()).iter().map(|p| p.source.id.clone()).collect(),
                    policy: cfg.conflict_policy,
                    values: values_of(proposals),
                }),
            }
        }
    }
}

/// Leave-one-out contribution of one model to a fused value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Impact {
    /// `fuse(all) − fuse(all without the model)`; for votes, 1 if the winner flips.
    Delta { value: f64 },
    /// Nothing left to fuse without it.
    SoleSource,
}

fn scalar(value: &Value, horizon: Option<u32>) -> Option<f64> {
    match value {
        Value::Continuous { value, .. } | Value::Probability { value } => Some(*value),
        Value::SurvivalCurve { points } => {
            let h = horizon.or_else(|| points.first().map(|(h, _)| *h))?;
            survival_at_horizon(value, h).ok()
        }
        Value::TimeToEventDensity { .. } => survival_at_horizon(value, horizon?).ok(),
        _ => None,
    }
}

pub fn model_impact(
    descriptor: &AttributeDescriptor,
    proposals: &[&Proposal],
    horizon: Option<u32>,
) -> Result<BTreeMap<String, Impact>, FusionError> {
    let proposals = sorted(proposals.iter().copied());
    let all = fuse(descriptor, &proposals, horizon)?;
    let vote = matches!(descriptor.value_kind, ValueKind::Categorical | ValueKind::Boolean);
    let h = horizon.or(descriptor.fusion.horizon_days);
    let mut out = BTreeMap::new();
    for (i, p) in proposals.iter().enumerate() {
        let rest: Vec<&Proposal> =
            proposals.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, q)| *q).collect();
        if rest.is_empty() {
            out.insert(p.source.id.clone(), Impact::SoleSource);
            continue;
        }
        let without = match fuse(descriptor, &rest, horizon) {
            Ok(o) => o,
            Err(FusionError::NoAggregators(_)) => {
                out.insert(p.source.id.clone(), Impact::SoleSource);
                continue;
            }
            Err(e) => return Err(e),
        };
        let delta = if vote {
            let a = all.fused_value().and_then(|v| ballot(v).ok());
            let b = without.fused_value().and_then(|v| ballot(v).ok());
            if a.is_some() && a == b { 0.0 } else { 1.0 }
        } else {
            match (all.fused_value().and_then(|v| scalar(v, h)), without.fused_value().and_then(|v| scalar(v, h))) {
                (Some(a), Some(b)) => a - b,
                _ => 0.0,
            }
        };
        out.insert(p.source.id.clone(), Impact::Delta { value: delta });
    }
    Ok(out)
}
