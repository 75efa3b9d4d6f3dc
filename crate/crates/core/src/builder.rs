//! Compiles a registry into a patient-specific bipartite knowledge graph.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use petgraph::algo::tarjan_scc;
use petgraph::graph::{DiGraph, NodeIndex};
use serde::{Deserialize, Serialize};

use crate::registry::{ModelKind, Registry, RegistryError};
use crate::types::{AttributeState, AttributeStatus, ProvenanceChain, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Attribute,
    Model,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelNode {
    pub enabled: bool,
    pub on_cycle: bool,
    /// Position of the node's strongly connected component in a longest-path
    /// layering of the condensation.
    pub level: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeGraph {
    pub registry_version: u64,
    pub attributes: Vec<String>,
    pub models: BTreeMap<String, ModelNode>,
    /// Model -> attribute for outputs, attribute -> model for inputs.
    pub edges: Vec<Edge>,
    pub cycle_flags: BTreeSet<String>,
    /// Strongly connected components with more than one node, ids ascending.
    pub cycles: Vec<Vec<String>>,
    pub attribute_levels: BTreeMap<String, usize>,
    /// attribute -> models consuming it, ascending.
    pub informed: BTreeMap<String, Vec<String>>,
    /// attribute -> models producing it, ascending.
    pub informing: BTreeMap<String, Vec<String>>,
}

impl KnowledgeGraph {
    pub fn compile(registry: &Registry) -> Self {
        let mut g: DiGraph<(NodeKind, &str), ()> = DiGraph::new();
        let mut attr_ix: BTreeMap<&str, NodeIndex> = BTreeMap::new();
        let mut model_ix: BTreeMap<&str, NodeIndex> = BTreeMap::new();
        for id in registry.attributes().keys() {
            attr_ix.insert(id, g.add_node((NodeKind::Attribute, id)));
        }
        for id in registry.models().keys() {
            model_ix.insert(id, g.add_node((NodeKind::Model, id)));
        }
        let mut edges = Vec::new();
        let mut informed: BTreeMap<String, Vec<String>> =
            registry.attributes().keys().map(|a| (a.clone(), Vec::new())).collect();
        let mut informing = informed.clone();
        for (id, m) in registry.models() {
            for input in m.input_ids() {
                g.add_edge(attr_ix[input], model_ix[id.as_str()], ());
                edges.push(Edge { from: input.to_string(), to: id.clone() });
                informed.get_mut(input).expect("validated").push(id.clone());
            }
            for out in &m.outputs {
                g.add_edge(model_ix[id.as_str()], attr_ix[out.as_str()], ());
                edges.push(Edge { from: id.clone(), to: out.clone() });
                informing.get_mut(out).expect("validated").push(id.clone());
            }
        }

        // tarjan_scc yields components in reverse topological order.
        let sccs = tarjan_scc(&g);
        let mut comp_of = vec![0usize; g.node_count()];
        for (c, scc) in sccs.iter().enumerate() {
            for n in scc {
                comp_of[n.index()] = c;
            }
        }
        let mut comp_level = vec![0usize; sccs.len()];
        for c in (0..sccs.len()).rev() {
            for n in &sccs[c] {
                for succ in g.neighbors(*n) {
                    let sc = comp_of[succ.index()];
                    if sc != c {
                        comp_level[sc] = comp_level[sc].max(comp_level[c] + 1);
                    }
                }
            }
        }

        let mut cycle_flags = BTreeSet::new();
        let mut cycles = Vec::new();
        for scc in sccs.iter().filter(|s| s.len() > 1) {
            let mut ids: Vec<String> = scc.iter().map(|n| g[*n].1.to_string()).collect();
            ids.sort();
            for n in scc {
                if g[*n].0 == NodeKind::Model {
                    cycle_flags.insert(g[*n].1.to_string());
                }
            }
            cycles.push(ids);
        }
        cycles.sort();

        let models = model_ix
            .iter()
            .map(|(id, ix)| {
                let node = ModelNode {
                    enabled: true,
                    on_cycle: cycle_flags.contains(*id),
                    level: comp_level[comp_of[ix.index()]],
                };
                (id.to_string(), node)
            })
            .collect();
        let attribute_levels =
            attr_ix.iter().map(|(id, ix)| (id.to_string(), comp_level[comp_of[ix.index()]])).collect();

        Self {
            registry_version: registry.version(),
            attributes: registry.attributes().keys().cloned().collect(),
            models,
            edges,
            cycle_flags,
            cycles,
            attribute_levels,
            informed,
            informing,
        }
    }

    pub fn is_acyclic(&self) -> bool {
        self.cycles.is_empty()
    }

    pub fn node_kind(&self, id: &str) -> Option<NodeKind> {
        if self.attribute_levels.contains_key(id) {
            Some(NodeKind::Attribute)
        } else if self.models.contains_key(id) {
            Some(NodeKind::Model)
        } else {
            None
        }
    }

    /// True when every edge joins an attribute and a model.
    pub fn is_bipartite(&self) -> bool {
        self.edges.iter().all(|e| match (self.node_kind(&e.from), self.node_kind(&e.to)) {
            (Some(a), Some(b)) => a != b,
            _ => false,
        })
    }
}

/// Runtime twin of one patient.
#[derive(Debug, Clone)]
pub struct TwinState {
    pub patient_id: String,
    registry: Arc<Registry>,
    pub graph: KnowledgeGraph,
    pub states: BTreeMap<String, AttributeState>,
    pub event_seq: u64,
    /// Attributes expected to arrive as external inputs.
    pub expected_inputs: BTreeSet<String>,
}

pub fn build_graph(
    registry: Arc<Registry>,
    patient_id: &str,
    initially_available: &BTreeSet<String>,
) -> Result<TwinState, RegistryError> {
    TwinState::new(registry, patient_id, initially_available)
}

impl TwinState {
    pub fn new(
        registry: Arc<Registry>,
        patient_id: &str,
        initially_available: &BTreeSet<String>,
    ) -> Result<Self, RegistryError> {
        for a in initially_available {
            registry.attribute(a)?;
        }
        let graph = KnowledgeGraph::compile(&registry);
        let states = graph.attributes.iter().map(|a| (a.clone(), AttributeState::default())).collect();
        Ok(Self {
            patient_id: patient_id.to_string(),
            registry,
            graph,
            states,
            event_seq: 0,
            expected_inputs: initially_available.clone(),
        })
    }

    /// Rebuilds a persisted twin on the registry version it was built with.
    pub fn restore(registry: Arc<Registry>, persisted: PersistedTwin) -> Result<Self, RegistryError> {
        let mut twin = Self::new(registry, &persisted.patient_id, &persisted.expected_inputs)?;
        for m in &persisted.disabled_models {
            twin.set_model_enabled(m, false)?;
        }
        for (attr, state) in persisted.states {
            if !twin.states.contains_key(&attr) {
                return Err(RegistryError::UnknownAttribute(attr));
            }
            twin.states.insert(attr, state);
        }
        twin.event_seq = persisted.event_seq;
        Ok(twin)
    }

    pub fn persisted(&self) -> PersistedTwin {
        PersistedTwin {
            patient_id: self.patient_id.clone(),
            registry_version: self.graph.registry_version,
            event_seq: self.event_seq,
            expected_inputs: self.expected_inputs.clone(),
            disabled_models: self.disabled_models(),
            states: self.states.clone(),
        }
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    pub fn state(&self, attr: &str) -> Result<&AttributeState, RegistryError> {
        self.states.get(attr).ok_or_else(|| RegistryError::UnknownAttribute(attr.to_string()))
    }

    pub fn is_enabled(&self, model: &str) -> bool {
        self.graph.models.get(model).is_some_and(|m| m.enabled)
    }

    pub fn disabled_models(&self) -> BTreeSet<String> {
        self.graph.models.iter().filter(|(_, m)| !m.enabled).map(|(id, _)| id.clone()).collect()
    }

    /// Toggles a model. Existing values stay as they are until the next run.
    pub fn set_model_enabled(&mut self, model: &str, enabled: bool) -> Result<(), RegistryError> {
        let node = self.graph.models.get_mut(model).ok_or_else(|| RegistryError::UnknownModel(model.to_string()))?;
        node.enabled = enabled;
        Ok(())
    }

    pub fn inputs_ready(&self, model: &str) -> bool {
        let Ok(desc) = self.registry.model(model) else { return false };
        desc.required_inputs().all(|a| self.states.get(a).is_some_and(AttributeState::is_available))
    }

    /// Enabled, evaluable models whose required inputs are all available.
    pub fn evaluable_frontier(&self) -> BTreeSet<String> {
        self.registry
            .models()
            .values()
            .filter(|m| m.kind != ModelKind::ExternalInput && self.is_enabled(&m.id) && self.inputs_ready(&m.id))
            .map(|m| m.id.clone())
            .collect()
    }

    pub fn snapshot(&self) -> GraphSnapshot {
        let mut nodes = Vec::new();
        for attr in &self.graph.attributes {
            let st = &self.states[attr];
            nodes.push(SnapshotNode {
                id: attr.clone(),
                kind: NodeKind::Attribute,
                model_kind: None,
                enabled: None,
                on_cycle: None,
                status: Some(st.status),
                value: st.consensus.clone(),
                provenance: Some(st.provenance.clone()),
            });
        }
        for (id, node) in &self.graph.models {
            nodes.push(SnapshotNode {
                id: id.clone(),
                kind: NodeKind::Model,
                model_kind: self.registry.model(id).ok().map(|m| m.kind),
                enabled: Some(node.enabled),
                on_cycle: Some(node.on_cycle),
                status: None,
                value: None,
                provenance: None,
            });
        }
        GraphSnapshot {
            patient_id: self.patient_id.clone(),
            registry_version: self.graph.registry_version,
            event_seq: self.event_seq,
            nodes,
            edges: self.graph.edges.clone(),
            cycles: self.graph.cycles.clone(),
        }
    }

    /// Canonical JSON of everything that persists; used for equality checks.
    pub fn state_json(&self) -> String {
        serde_json::to_string(&self.persisted()).expect("twin serializes")
    }
}

/// What a patient record stores about its twin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistedTwin {
    pub patient_id: String,
    pub registry_version: u64,
    pub event_seq: u64,
    pub expected_inputs: BTreeSet<String>,
    pub disabled_models: BTreeSet<String>,
    pub states: BTreeMap<String, AttributeState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotNode {
    pub id: String,
    pub kind: NodeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_kind: Option<ModelKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enabled: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub on_cycle: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<AttributeStatus>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<ProvenanceChain>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSnapshot {
    pub patient_id: String,
    pub registry_version: u64,
    pub event_seq: u64,
    pub nodes: Vec<SnapshotNode>,
    pub edges: Vec<Edge>,
    pub cycles: Vec<Vec<String>>,
}

impl GraphSnapshot {
    pub fn node(&self, id: &str) -> Option<&SnapshotNode> {
        self.nodes.iter().find(|n| n.id == id)
    }
}
