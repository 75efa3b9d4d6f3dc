#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde_json::json;

use twin_core::engine::ExternalEvent;
use twin_core::registry::{load_registry, Registry};
use twin_core::service::{read_journal_file, read_registry_file, Journal};
use twin_core::types::{AttributeStatus, Value};
use twin_core::TwinState;

pub const VALUE_TOLERANCE: f64 = 1e-9;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn registry(name: &str) -> Registry {
    read_registry_file(&fixture(&format!("{name}.registry.json"))).expect("fixture registry loads")
}

pub fn journal(name: &str) -> Journal {
    read_journal_file(&fixture(&format!("{name}.journal.json"))).expect("fixture journal loads")
}

pub fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
}

pub fn event(attr: &str, value: Value, minute: i64) -> ExternalEvent {
    ExternalEvent::new(attr, value, t0() + Duration::minutes(minute), "test")
}

/// All files below `root`, keyed by relative path.
pub fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(base, &p, out);
            } else {
                let rel = p.strip_prefix(base).unwrap().to_string_lossy().replace('\\', "/");
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

pub fn base_models(twin: &TwinState, attr: &str) -> BTreeSet<String> {
    twin.state(attr).unwrap().provenance.base_models().map(str::to_string).collect()
}

// ---------------------------------------------------------------------------
// Random registries
// ---------------------------------------------------------------------------

pub const RANGE: f64 = 100.0;

/// A random bipartite registry of continuous attributes `a0..` fused by static
/// weighted averages and linear models `m0..`. With `cycle_probability` zero
/// every edge points from a lower to a higher attribute index, so the graph is
/// a DAG; otherwise each model may take one input from above its outputs.
pub fn random_registry<R: Rng>(rng: &mut R, max_attrs: usize, max_models: usize, cycle_probability: f64) -> Registry {
    let n_attrs = rng.random_range(2..=max_attrs);
    let n_models = rng.random_range(1..=max_models);
    let mut models = Vec::new();
    let mut informers: Vec<Vec<String>> = vec![Vec::new(); n_attrs];
    for m in 0..n_models {
        let id = format!("m{m}");
        let first_out = rng.random_range(1..n_attrs);
        let mut outputs = vec![first_out];
        if first_out + 1 < n_attrs && rng.random_bool(0.3) {
            outputs.push(rng.random_range(first_out + 1..n_attrs));
        }
        let lowest = *outputs.iter().min().unwrap();
        let below: Vec<usize> = (0..lowest).collect();
        let k = rng.random_range(1..=3.min(below.len()));
        let mut inputs: BTreeSet<usize> = below.choose_multiple(rng, k).copied().collect();
        if cycle_probability > 0.0 && rng.random_bool(cycle_probability) {
            let above: Vec<usize> = (lowest + 1..n_attrs).filter(|i| !outputs.contains(i)).collect();
            if let Some(i) = above.choose(rng) {
                inputs.insert(*i);
            }
        }
        let mut weights = serde_json::Map::new();
        let mut input_refs = Vec::new();
        for (n, i) in inputs.iter().enumerate() {
            weights.insert(format!("a{i}"), json!(rng.random_range(-1.0..1.0)));
            // The first input is always required so the model has something to wait for.
            let required = n == 0 || rng.random_bool(0.8);
            input_refs.push(json!({"attr": format!("a{i}"), "required": required}));
        }
        let mut outs = serde_json::Map::new();
        for o in &outputs {
            informers[*o].push(id.clone());
            outs.insert(format!("a{o}"), json!({"weights": weights, "bias": rng.random_range(-5.0..5.0)}));
        }
        models.push(json!({
            "id": id,
            "kind": "linear",
            "inputs": input_refs,
            "outputs": outputs.iter().map(|o| format!("a{o}")).collect::<Vec<_>>(),
            "params": {"outputs": outs},
        }));
    }
    let attributes: Vec<_> = (0..n_attrs)
        .map(|i| {
            let weights: serde_json::Map<String, serde_json::Value> =
                informers[i].iter().map(|m| (m.clone(), json!(rng.random_range(0.1..3.0)))).collect();
            json!({
                "id": format!("a{i}"),
                "value_kind": "continuous",
                "range": [-RANGE, RANGE],
                "fusion": {"mode": "weighted_average", "weighting_rule": "static", "weights": weights},
            })
        })
        .collect();
    let doc = json!({"version": 1, "attributes": attributes, "models": models});
    load_registry(&doc.to_string()).expect("generated registry is valid")
}

pub fn random_event<R: Rng>(rng: &mut R, registry: &Registry, minute: i64) -> ExternalEvent {
    let ids: Vec<&String> = registry.attributes().keys().collect();
    let attr = ids.choose(rng).unwrap();
    event(attr, Value::continuous(rng.random_range(-RANGE..RANGE)), minute)
}

// ---------------------------------------------------------------------------
// Synchronous round-based oracle
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct OracleValue {
    pub value: f64,
    pub provenance: BTreeSet<String>,
    pub measured: bool,
}

/// Fixpoint of a registry of linear models and static weighted-average
/// fusions, computed by rounds: every model whose required inputs are known
/// evaluates against the previous round's values, then every attribute is
/// fused from scratch. Measured values always win. Stops when a round
/// changes nothing.
pub fn oracle_fixpoint(registry: &Registry, externals: &BTreeMap<String, f64>) -> BTreeMap<String, OracleValue> {
    let mut current: BTreeMap<String, OracleValue> = BTreeMap::new();
    let max_rounds = registry.attributes().len() + registry.models().len() + 2;
    for _ in 0..max_rounds {
        let mut proposals: BTreeMap<String, Vec<(String, f64, BTreeSet<String>)>> = BTreeMap::new();
        for (id, model) in registry.models() {
            let ready = model.inputs.iter().filter(|i| i.required).all(|i| current.contains_key(&i.attr));
            if !ready {
                continue;
            }
            let mut chain = BTreeSet::new();
            for i in &model.inputs {
                if let Some(v) = current.get(&i.attr) {
                    chain.extend(v.provenance.iter().cloned());
                }
            }
            chain.insert(format!("model:{id}"));
            for out in &model.outputs {
                let coeff = &model.params["outputs"][out];
                let mut y = coeff["bias"].as_f64().unwrap();
                for (attr, w) in coeff["weights"].as_object().unwrap() {
                    if let Some(v) = current.get(attr) {
                        y += w.as_f64().unwrap() * v.value;
                    }
                }
                proposals.entry(out.clone()).or_default().push((id.clone(), y.clamp(-RANGE, RANGE), chain.clone()));
            }
        }
        let mut next = BTreeMap::new();
        for (attr, desc) in registry.attributes() {
            let fusion = format!("fusion:{attr}");
            if let Some(v) = externals.get(attr) {
                next.insert(attr.clone(), OracleValue { value: *v, provenance: BTreeSet::from([fusion]), measured: true });
                continue;
            }
            let Some(props) = proposals.get(attr) else { continue };
            let weights = desc.fusion.weights.as_ref().unwrap();
            let total: f64 = props.iter().map(|(m, _, _)| weights[m]).sum();
            let value = props.iter().map(|(m, y, _)| weights[m] * y).sum::<f64>() / total;
            let mut provenance: BTreeSet<String> = props.iter().flat_map(|(_, _, c)| c.iter().cloned()).collect();
            provenance.insert(fusion);
            next.insert(attr.clone(), OracleValue { value, provenance, measured: false });
        }
        if next == current {
            return current;
        }
        current = next;
    }
    panic!("oracle did not settle on an acyclic registry");
}

/// Engine state projected onto the oracle's shape.
pub fn engine_view(twin: &TwinState) -> BTreeMap<String, OracleValue> {
    twin.states
        .iter()
        .filter(|(_, st)| st.status != AttributeStatus::Unknown)
        .map(|(id, st)| {
            let value = st.consensus.as_ref().and_then(Value::as_number).expect("continuous value");
            let provenance = st.provenance.iter().map(|s| s.to_string()).collect();
            (id.clone(), OracleValue { value, provenance, measured: st.status == AttributeStatus::Measured })
        })
        .collect()
}

pub fn shared(registry: Registry) -> Arc<Registry> {
    Arc::new(registry)
}
