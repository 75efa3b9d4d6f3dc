//! Patient digital twin orchestration: a bipartite graph of attributes and
//! predictive models, propagated to a fixpoint with provenance-based loop
//! cutting and per-attribute fusion.

pub mod backbone;
pub mod builder;
pub mod engine;
pub mod fusion;
pub mod registry;
pub mod service;
pub mod types;

pub use builder::{build_graph, KnowledgeGraph, TwinState};
pub use engine::{ingest, what_if, ExternalEvent, RunReport};
pub use fusion::FusionOutcome;
pub use registry::{load_registry, Registry};
pub use types::{ProvenanceChain, Signature, Value};
