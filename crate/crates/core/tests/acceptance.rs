//! Acceptance criteria 1 through 9. Each test prints one PASS/FAIL line.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use tower::ServiceExt;

use common::*;
use twin_core::backbone::Store;
use twin_core::engine::{ingest, what_if, WhatIfQuery};
use twin_core::fusion::{fuse, FusionOutcome};
use twin_core::registry::{AttributeDescriptor, Registry};
use twin_core::service::{self, replay_into, AppState, Completion, Journal};
use twin_core::types::{AttributeStatus, Proposal, ProvenanceChain, Signature, Value};
use twin_core::{build_graph, TwinState};

// Pinned tolerances and bounds.
const TERMINATION_GRAPHS: usize = 1000;
const TERMINATION_EVENTS_PER_GRAPH: usize = 3;
const TERMINATION_BUDGET: Duration = Duration::from_secs(60);
const ORACLE_DAGS: usize = 500;
const ORACLE_TOLERANCE: f64 = 1e-9;
const RENORMALIZATION_DRAWS: usize = 1000;
const RENORMALIZATION_TOLERANCE: f64 = 1e-12;
const OVERWRITE_STREAMS: usize = 1000;
const SURVIVAL_TOLERANCE: f64 = 1e-9;
const PROSTATE_REPLAY_BUDGET: Duration = Duration::from_secs(1);
const COHORT_SIZE: usize = 50;

fn verdict(n: u32, title: &str, result: Result<String, String>) {
    let line = match &result {
        Ok(detail) => format!("criterion {n} PASS {title}: {detail}"),
        Err(detail) => format!("criterion {n} FAIL {title}: {detail}"),
    };
    // Straight to stdout so the line survives test output capture.
    let _ = writeln!(std::io::stdout(), "{line}");
    if let Err(e) = result {
        panic!("criterion {n} failed: {e}");
    }
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn fresh_twin(registry: &Registry, patient: &str) -> TwinState {
    build_graph(Arc::new(registry.clone()), patient, &BTreeSet::new()).unwrap()
}

// ---------------------------------------------------------------------------
// 1. Termination and sign-once
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_termination_and_sign_once() {
    let run = || -> Result<String, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5151);
        let started = Instant::now();
        let (mut cyclic, mut runs, mut cuts, mut discards) = (0usize, 0usize, 0usize, 0usize);
        for g in 0..TERMINATION_GRAPHS {
            let registry = random_registry(&mut rng, 50, 100, 0.3);
            let mut twin = fresh_twin(&registry, "p");
            if !twin.graph.is_acyclic() {
                cyclic += 1;
            }
            for e in 0..TERMINATION_EVENTS_PER_GRAPH {
                let ev = random_event(&mut rng, &registry, e as i64);
                let report = ingest(&mut twin, ev).map_err(|e| format!("graph {g}: {e}"))?;
                runs += 1;
                cuts += report.loop_cuts.len();
                discards += report.discarded.len();
                let fired = report.fired_order();
                let unique: BTreeSet<&str> = fired.iter().copied().collect();
                ensure!(unique.len() == fired.len(), "graph {g}: a model fired twice in one run: {fired:?}");
                for (attr, st) in &twin.states {
                    let sigs: Vec<String> = st.provenance.iter().map(|s| s.to_string()).collect();
                    let set: BTreeSet<&String> = sigs.iter().collect();
                    ensure!(set.len() == sigs.len(), "graph {g}: duplicate signature in provenance of {attr}: {sigs:?}");
                    let signed_now = st.history.iter().filter(|h| h.event_seq == report.event_seq).count();
                    ensure!(signed_now <= 1, "graph {g}: {attr} recorded {signed_now} times in one run");
                }
            }
        }
        let elapsed = started.elapsed();
        ensure!(elapsed <= TERMINATION_BUDGET, "took {elapsed:?}, budget {TERMINATION_BUDGET:?}");
        ensure!(cyclic > TERMINATION_GRAPHS / 4, "only {cyclic} cyclic graphs generated");
        Ok(format!(
            "{TERMINATION_GRAPHS} graphs ({cyclic} cyclic), {runs} runs halted in {:.2}s; {cuts} loop cuts, {discards} pinned discards",
            elapsed.as_secs_f64()
        ))
    };
    verdict(1, "termination and sign-once", run());
}

// ---------------------------------------------------------------------------
// 2. Oracle equivalence on DAGs
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_oracle_equivalence() {
    let run = || -> Result<String, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x2222);
        let mut compared = 0usize;
        let mut worst = 0.0f64;
        for g in 0..ORACLE_DAGS {
            let registry = random_registry(&mut rng, 50, 100, 0.0);
            let mut twin = fresh_twin(&registry, "p");
            ensure!(twin.graph.is_acyclic(), "graph {g} should be acyclic");
            let mut externals = BTreeMap::new();
            let n_events = rng.random_range(1..=4);
            for e in 0..n_events {
                let ev = random_event(&mut rng, &registry, e);
                externals.insert(ev.attribute.clone(), ev.value.as_number().unwrap());
                ingest(&mut twin, ev).map_err(|e| format!("graph {g}: {e}"))?;
                let engine = engine_view(&twin);
                let oracle = oracle_fixpoint(&registry, &externals);
                let ek: BTreeSet<_> = engine.keys().collect();
                let ok: BTreeSet<_> = oracle.keys().collect();
                ensure!(ek == ok, "graph {g} event {e}: available attributes differ: engine {ek:?} oracle {ok:?}");
                for (attr, o) in &oracle {
                    let v = &engine[attr];
                    let diff = (v.value - o.value).abs();
                    worst = worst.max(diff);
                    ensure!(diff <= ORACLE_TOLERANCE, "graph {g} {attr}: engine {} oracle {}", v.value, o.value);
                    ensure!(v.provenance == o.provenance, "graph {g} {attr}: provenance {:?} vs {:?}", v.provenance, o.provenance);
                    ensure!(v.measured == o.measured, "graph {g} {attr}: measured flag differs");
                    compared += 1;
                }
            }
        }
        Ok(format!("{ORACLE_DAGS} DAGs, {compared} attribute states matched, worst |Δ| = {worst:.2e} (tolerance {ORACLE_TOLERANCE:e})"))
    };
    verdict(2, "oracle equivalence", run());
}

// ---------------------------------------------------------------------------
// 3. Missing-input renormalization
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_missing_input_renormalization() {
    let run = || -> Result<String, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x3333);
        let mut worst = 0.0f64;
        for d in 0..RENORMALIZATION_DRAWS {
            let n = rng.random_range(1..=8);
            let ids: Vec<String> = (0..n).map(|i| format!("m{i}")).collect();
            let weights: BTreeMap<String, f64> = ids.iter().map(|m| (m.clone(), rng.random_range(0.01..5.0))).collect();
            let desc: AttributeDescriptor = serde_json::from_value(json!({
                "id": "x", "value_kind": "continuous",
                "fusion": {"mode": "weighted_average", "weighting_rule": "static", "weights": weights},
            }))
            .unwrap();
            let mut present: Vec<&String> = ids.iter().filter(|_| rng.random_bool(0.6)).collect();
            if present.is_empty() {
                present.push(&ids[rng.random_range(0..n)]);
            }
            let proposals: Vec<Proposal> = present
                .iter()
                .map(|m| Proposal::new(m, "x", Value::continuous(rng.random_range(-50.0..50.0)), ProvenanceChain::new(), 1))
                .collect();
            let refs: Vec<&Proposal> = proposals.iter().collect();
            let outcome = fuse(&desc, &refs, None).map_err(|e| format!("draw {d}: {e}"))?;
            let got = outcome.fused_value().and_then(Value::as_number).ok_or(format!("draw {d}: not fused"))?;
            let num: f64 = proposals.iter().map(|p| weights[&p.source.id] * p.value.as_number().unwrap()).sum();
            let den: f64 = proposals.iter().map(|p| weights[&p.source.id]).sum();
            let expected = num / den;
            let diff = (got - expected).abs();
            worst = worst.max(diff);
            ensure!(diff <= RENORMALIZATION_TOLERANCE, "draw {d}: fused {got}, expected {expected}");
        }
        Ok(format!("{RENORMALIZATION_DRAWS} draws, worst |Δ| = {worst:.2e} (tolerance {RENORMALIZATION_TOLERANCE:e})"))
    };
    verdict(3, "missing-input renormalization", run());
}

// ---------------------------------------------------------------------------
// 4. Overwrite absorption
// ---------------------------------------------------------------------------

fn pinned_registry() -> Registry {
    let mut attributes = vec![json!({
        "id": "x", "value_kind": "continuous", "range": [-100, 100],
        "fusion": {"mode": "overwrite"},
    })];
    let mut models = vec![json!({"id": "manual", "kind": "external_input", "outputs": ["x"]})];
    for i in 0..5 {
        attributes.push(json!({"id": format!("u{i}"), "value_kind": "continuous", "range": [-100, 100], "fusion": {"mode": "overwrite"}}));
        models.push(json!({
            "id": format!("p{i}"), "kind": "linear", "inputs": [{"attr": format!("u{i}")}], "outputs": ["x"],
            "params": {"weights": {format!("u{i}"): 0.5 + i as f64}, "bias": i as f64},
        }));
    }
    twin_core::load_registry(&json!({"version": 1, "attributes": attributes, "models": models}).to_string()).unwrap()
}

#[test]
fn criterion_4_overwrite_absorption() {
    let run = || -> Result<String, String> {
        let registry = pinned_registry();
        let mut rng = ChaCha8Rng::seed_from_u64(0x4444);
        let mut discarded = 0usize;
        let expected_prov = serde_json::to_vec(&vec!["fusion:x"]).unwrap();
        for s in 0..OVERWRITE_STREAMS {
            let mut twin = fresh_twin(&registry, "p");
            let pin = Value::continuous(rng.random_range(-100.0..100.0));
            ingest(&mut twin, event("x", pin, 0)).unwrap();
            let value_bytes = serde_json::to_vec(&twin.state("x").unwrap().consensus).unwrap();
            let prov_bytes = serde_json::to_vec(&twin.state("x").unwrap().provenance).unwrap();
            ensure!(prov_bytes == expected_prov, "stream {s}: pin provenance {}", String::from_utf8_lossy(&prov_bytes));
            for e in 0..rng.random_range(1..=8) {
                let u = format!("u{}", rng.random_range(0..5));
                let report = ingest(&mut twin, event(&u, Value::continuous(rng.random_range(-100.0..100.0)), e + 1)).unwrap();
                discarded += report.discarded.len();
                ensure!(report.discarded.iter().all(|d| d.attribute == "x"), "stream {s}: unexpected discard");
                ensure!(!report.changed_attributes.contains("x"), "stream {s}: x reported as changed");
                let st = twin.state("x").unwrap();
                ensure!(st.status == AttributeStatus::Measured, "stream {s}: pin lost");
                ensure!(st.proposals.is_empty(), "stream {s}: a proposal was stored on a pinned attribute");
                ensure!(serde_json::to_vec(&st.consensus).unwrap() == value_bytes, "stream {s}: consensus bytes moved");
                ensure!(serde_json::to_vec(&st.provenance).unwrap() == prov_bytes, "stream {s}: provenance bytes moved");
            }
        }
        ensure!(discarded > 0, "no proposal ever reached the pinned attribute");
        Ok(format!("{OVERWRITE_STREAMS} streams, {discarded} proposals discarded, consensus and {{fusion:x}} byte-stable"))
    };
    verdict(4, "overwrite absorption", run());
}

// ---------------------------------------------------------------------------
// 5. Survival verification
// ---------------------------------------------------------------------------

/// Survival at `h` read off by hand: densities accumulate mass strictly before
/// `h`; curves must carry `h` as a point.
fn hand_survival(v: &Value, h: u32) -> f64 {
    match v {
        Value::TimeToEventDensity { masses } => 1.0 - masses.iter().filter(|(d, _)| *d < h).map(|(_, m)| m).sum::<f64>(),
        Value::SurvivalCurve { points } => points.iter().find(|(d, _)| *d == h).map(|(_, s)| *s).expect("curve has the horizon"),
        other => panic!("not a survival value: {other:?}"),
    }
}

fn first_horizon(v: &Value) -> u32 {
    match v {
        Value::TimeToEventDensity { .. } => 0,
        Value::SurvivalCurve { points } => points[0].0,
        other => panic!("not a survival value: {other:?}"),
    }
}

#[test]
fn criterion_5_survival_verification() {
    let run = || -> Result<String, String> {
        let dir = tempfile::tempdir().unwrap();
        let bad = replay_into(&Store::open(dir.path().join("bad")).unwrap(), registry("survival_conflict"), &journal("survival"))
            .map_err(|e| e.to_string())?;
        let report = &bad.reports[0];
        let FusionOutcome::Conflict { models, values, .. } = &report.fusion_outcomes["survival"] else {
            return Err(format!("expected a conflict, got {:?}", report.fusion_outcomes["survival"]));
        };
        let involved: BTreeSet<&str> = models.iter().map(String::as_str).collect();
        ensure!(involved == BTreeSet::from(["chen_like", "yang_like", "zhao_like"]), "conflict lists {involved:?}");
        let fused = (hand_survival(&values["chen_like"], 180) + hand_survival(&values["zhao_like"], 180)) / 2.0;
        let verifier = hand_survival(&values["yang_like"], 365);
        ensure!((fused - 0.70).abs() <= SURVIVAL_TOLERANCE, "hand-fused S(180) = {fused}");
        ensure!((verifier - 0.75).abs() <= SURVIVAL_TOLERANCE, "verifier S(365) = {verifier}");
        ensure!(!report.fired_order().contains(&"care_planner"), "conflict propagated to care_planner");
        ensure!(report.changed_attributes == BTreeSet::from(["age".to_string()]), "changed {:?}", report.changed_attributes);
        ensure!(bad.twin.state("survival").unwrap().status == AttributeStatus::Unknown, "survival got a value");
        ensure!(bad.twin.state("care_intensity").unwrap().status == AttributeStatus::Unknown, "downstream got a value");
        ensure!(bad.survival_conflict(), "replay did not flag the survival conflict");

        let good = replay_into(&Store::open(dir.path().join("good")).unwrap(), registry("survival_ok"), &journal("survival"))
            .map_err(|e| e.to_string())?;
        let report = &good.reports[0];
        let FusionOutcome::Fused { value, survival: Some(detail), .. } = &report.fusion_outcomes["survival"] else {
            return Err(format!("expected fused, got {:?}", report.fusion_outcomes["survival"]));
        };
        let s = hand_survival(value, 180);
        ensure!((s - 0.70).abs() <= SURVIVAL_TOLERANCE, "fused S(180) = {s}");
        ensure!(detail.aggregators == ["chen_like", "zhao_like"] && detail.verifiers == ["yang_like"], "detail {detail:?}");
        ensure!(report.fired_order().contains(&"care_planner"), "care_planner did not fire");
        ensure!(!good.survival_conflict(), "spurious conflict");
        Ok(format!("violation: fused {fused:.2} < verifier {verifier:.2} → Conflict, no downstream run; ok fixture fused {s:.2}"))
    };
    verdict(5, "survival verification", run());
}

// ---------------------------------------------------------------------------
// 6. Prostate fixture
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_prostate_fixture() {
    let run = || -> Result<String, String> {
        let registry = registry("prostate");
        let journal = journal("prostate");
        let mut twin = fresh_twin(&registry, &journal.patient);
        let (prefix, mri) = journal.events.split_at(journal.events.len() - 1);
        for e in prefix {
            ingest(&mut twin, e.clone()).unwrap();
        }
        let after_prefix = base_models(&twin, "high_gs");
        ensure!(after_prefix == BTreeSet::from(["clinical_risk_calculator".to_string()]), "after prefix: {after_prefix:?}");
        ensure!(mri[0].attribute == "pirads", "journal should end with the PI-RADS read");
        ingest(&mut twin, mri[0].clone()).unwrap();
        let after_mri = base_models(&twin, "high_gs");
        let expected: BTreeSet<String> =
            ["clinical_risk_calculator", "mixed_risk_calculator", "radiomics_model"].map(String::from).into();
        ensure!(after_mri == expected, "after MRI: {after_mri:?}");

        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let started = Instant::now();
        let outcome = replay_into(&store, registry, &journal).map_err(|e| e.to_string())?;
        let elapsed = started.elapsed();
        ensure!(elapsed <= PROSTATE_REPLAY_BUDGET, "replay took {elapsed:?}");
        ensure!(store.runs(&journal.patient).unwrap().len() == 6, "expected 6 runs");
        let history = &outcome.twin.state("high_gs").unwrap().history;
        ensure!(history.len() == 2, "high_gs timeline has {} entries", history.len());
        Ok(format!(
            "high_gs base models: {} after clinical prefix, {} after MRI; 6 runs replayed in {:.1} ms",
            after_prefix.len(),
            after_mri.len(),
            elapsed.as_secs_f64() * 1e3
        ))
    };
    verdict(6, "prostate fixture reproduction", run());
}

// ---------------------------------------------------------------------------
// 7. Glioma fixture
// ---------------------------------------------------------------------------

fn replay_twin(registry: &Registry, journal: &Journal) -> (TwinState, Vec<twin_core::RunReport>) {
    let mut twin = fresh_twin(registry, &journal.patient);
    let reports = journal.events.iter().map(|e| ingest(&mut twin, e.clone()).unwrap()).collect();
    (twin, reports)
}

#[test]
fn criterion_7_glioma_fixture() {
    let run = || -> Result<String, String> {
        let registry = registry("glioma");

        let path = ["radiomic_features", "tang_like", "mgmt", "kazerooni_like", "survival"];
        let twin = fresh_twin(&registry, "g");
        for pair in path.windows(2) {
            let linked = twin.graph.edges.iter().any(|e| e.from == pair[0] && e.to == pair[1]);
            ensure!(linked, "missing edge {} → {}", pair[0], pair[1]);
        }

        let (with_lab, _) = replay_twin(&registry, &journal("glioma"));
        let mgmt = with_lab.state("mgmt").unwrap();
        ensure!(mgmt.status == AttributeStatus::Measured, "mgmt not pinned with lab: {:?}", mgmt.status);
        ensure!(mgmt.provenance.iter().map(|s| s.to_string()).collect::<Vec<_>>() == ["fusion:mgmt"], "lab mgmt provenance");

        let (no_lab, reports) = replay_twin(&registry, &journal("glioma_nolab"));
        let mgmt = no_lab.state("mgmt").unwrap();
        ensure!(mgmt.status == AttributeStatus::Predicted, "mgmt not predicted without lab");
        ensure!(base_models(&no_lab, "mgmt") == BTreeSet::from(["tang_like".to_string()]), "mgmt predicted by others");
        let cross = reports.iter().find(|r| r.fired_order().contains(&"tang_like")).ok_or("tang_like never fired")?;
        let order = cross.fired_order();
        let tang = order.iter().position(|m| *m == "tang_like").unwrap();
        let kaz = order.iter().position(|m| *m == "kazerooni_like").ok_or("kazerooni_like did not fire with tang_like")?;
        ensure!(tang < kaz, "fired order {order:?}");
        ensure!(cross.changed_attributes.contains("mgmt"), "mgmt was not fused in between");
        let kaz_chain = &no_lab.state("survival").unwrap().proposals["kazerooni_like"].provenance;
        ensure!(
            kaz_chain.contains(&Signature::model("tang_like")) && kaz_chain.contains(&Signature::fusion("mgmt")),
            "kazerooni_like proposal does not trace back through mgmt"
        );

        // Six-month what-if with radiotherapy given.
        let before = serde_json::to_vec(&no_lab.snapshot()).unwrap();
        let overrides = vec![event("radiotherapy", Value::boolean(true), 10_000)];
        let query = WhatIfQuery { attribute: "survival".into(), horizon_days: Some(180) };
        let (_, report) = what_if(&no_lab, overrides.clone(), Some(&query)).map_err(|e| e.to_string())?;
        ensure!(serde_json::to_vec(&no_lab.snapshot()).unwrap() == before, "what-if touched the twin");
        let q = report.query.ok_or("no query result")?;
        let FusionOutcome::Fused { survival: Some(detail), .. } = &q.outcome else {
            return Err(format!("query outcome {:?}", q.outcome));
        };
        let p = q.probability.ok_or("no probability")?;

        let mut scratch = no_lab.clone();
        for e in overrides {
            ingest(&mut scratch, e).unwrap();
        }
        let proposals = &scratch.state("survival").unwrap().proposals;
        let aggregators: Vec<&String> = proposals.iter().filter(|(_, p)| first_horizon(&p.value) <= 180).map(|(m, _)| m).collect();
        let verifiers: Vec<&String> = proposals.iter().filter(|(_, p)| first_horizon(&p.value) > 180).map(|(m, _)| m).collect();
        ensure!(detail.aggregators.iter().collect::<Vec<_>>() == aggregators, "aggregators {:?} vs {aggregators:?}", detail.aggregators);
        ensure!(detail.verifiers.iter().collect::<Vec<_>>() == verifiers, "verifiers {:?} vs {verifiers:?}", detail.verifiers);
        ensure!(verifiers.iter().any(|m| *m == "senders_like"), "senders_like did not report");
        // Accuracy weighting with no cohort yet: every model at the same prior.
        let expected = aggregators.iter().map(|m| hand_survival(&proposals[*m].value, 180)).sum::<f64>() / aggregators.len() as f64;
        ensure!((p - expected).abs() <= SURVIVAL_TOLERANCE, "what-if S(180) {p} vs hand {expected}");
        for v in &verifiers {
            let s = &proposals[*v].value;
            ensure!(hand_survival(s, first_horizon(s)) <= p + SURVIVAL_TOLERANCE, "verifier {v} exceeds fused");
        }
        Ok(format!(
            "mgmt pinned with lab, predicted by tang_like without; tang_like → mgmt → kazerooni_like in order; \
             6-month what-if {p:.4} from {} aggregators, {} verifiers",
            aggregators.len(),
            verifiers.len()
        ))
    };
    verdict(7, "glioma fixture reproduction", run());
}

// ---------------------------------------------------------------------------
// 8. Retrain correctness
// ---------------------------------------------------------------------------

fn synthetic_prostate_journal(rng: &mut ChaCha8Rng, i: usize) -> Journal {
    let mut events = vec![
        event("age", Value::continuous(rng.random_range(45.0..80.0)), 0),
        event("psa", Value::continuous(rng.random_range(0.5..25.0)), 1),
        event("dre", Value::label(if rng.random_bool(0.4) { "abnormal" } else { "normal" }, ["abnormal", "normal"]), 2),
        event("family_history", Value::boolean(rng.random_bool(0.3)), 3),
        event("prior_negative_biopsy", Value::boolean(rng.random_bool(0.2)), 4),
    ];
    // Some patients never get an MRI, so counts differ per model.
    if rng.random_bool(0.7) {
        events.push(event("pirads", Value::continuous(rng.random_range(1..=5) as f64), 5));
    }
    let label = Value::boolean(rng.random_bool(0.45));
    Journal {
        registry: None,
        patient: format!("synthetic-{i:03}"),
        events,
        completion: Some(Completion { labels: BTreeMap::from([("high_gs".to_string(), label)]) }),
    }
}

#[test]
fn criterion_8_retrain_correctness() {
    let run = || -> Result<String, String> {
        let registry = registry("prostate");
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path().join("cohort")).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0x8888);
        let journals: Vec<Journal> = (0..COHORT_SIZE).map(|i| synthetic_prostate_journal(&mut rng, i)).collect();
        for j in &journals {
            replay_into(&store, registry.clone(), j).map_err(|e| e.to_string())?;
        }
        let outcome = store.retrain().map_err(|e| e.to_string())?;
        ensure!(outcome.registry.version() == 2, "new version {}", outcome.registry.version());

        // Brute force: every stored proposal against its label, threshold 0.5.
        let mut counts: BTreeMap<String, (u64, u64)> = BTreeMap::new();
        for j in &journals {
            let (_, twin) = store.load_twin(&j.patient).unwrap();
            let Value::Boolean { value: truth } = j.completion.as_ref().unwrap().labels["high_gs"] else { unreachable!() };
            for (model, p) in &twin.state("high_gs").unwrap().proposals {
                let c = counts.entry(model.clone()).or_default();
                c.0 += 1;
                if (p.value.as_number().unwrap() >= 0.5) == truth {
                    c.1 += 1;
                }
            }
        }
        let weights = outcome.registry.attribute("high_gs").unwrap().fusion.weights.clone().ok_or("no weights written")?;
        let proposing = ["clinical_risk_calculator", "mixed_risk_calculator", "radiomics_model"];
        ensure!(weights.keys().map(String::as_str).eq(proposing), "weights for {:?}", weights.keys());
        for m in proposing {
            let (n, c) = counts.get(m).copied().unwrap_or_default();
            let expected = (c as f64 + 1.0) / (n as f64 + 2.0);
            ensure!(weights[m] == expected, "{m}: weight {} vs brute force {expected} ({c}/{n})", weights[m]);
        }

        // Old journals replay identically under the version they were recorded with.
        let pinned = store.load_registry(1).map_err(|e| e.to_string())?;
        let replay = Store::open(dir.path().join("replay")).unwrap();
        for j in journals.iter().take(5) {
            replay_into(&replay, pinned.clone(), j).map_err(|e| e.to_string())?;
            for file in [format!("{}.json", j.patient), format!("{}.runs.jsonl", j.patient)] {
                let a = std::fs::read(store.root().join("patients").join(&file)).unwrap();
                let b = std::fs::read(replay.root().join("patients").join(&file)).unwrap();
                ensure!(a == b, "{file} differs after replay under pinned version 1");
            }
        }
        let (record, twin) = store.load_twin(&journals[0].patient).unwrap();
        ensure!(record.registry_version == 1 && twin.registry().version() == 1, "completed record lost its version pin");
        let summary: Vec<String> = proposing.iter().map(|m| format!("{m}={:.4}", weights[*m])).collect();
        Ok(format!("{COHORT_SIZE} patients; weights match brute force exactly ({}); 5 journals replay byte-identical under v1", summary.join(", ")))
    };
    verdict(8, "retrain correctness", run());
}

// ---------------------------------------------------------------------------
// 9. API/CLI parity
// ---------------------------------------------------------------------------

async fn call(app: &axum::Router, method: &str, uri: &str, body: serde_json::Value) -> (StatusCode, serde_json::Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(serde_json::Value::Null))
}

async fn replay_over_http(registry: &Registry, journal: &Journal, root: &std::path::Path) -> Result<(), String> {
    let state = Arc::new(AppState::new(root, Some(registry), None).map_err(|e| e.to_string())?);
    let app = service::router(state);
    let (status, body) = call(&app, "POST", "/patients", json!({"id": journal.patient})).await;
    ensure!(status == StatusCode::CREATED, "create patient: {status} {body}");
    let uri = format!("/patients/{}/observations", journal.patient);
    for e in &journal.events {
        let (status, body) = call(&app, "POST", &uri, serde_json::to_value(e).unwrap()).await;
        ensure!(status == StatusCode::OK, "observation: {status} {body}");
    }
    if let Some(c) = &journal.completion {
        let (status, body) =
            call(&app, "POST", &format!("/patients/{}/complete", journal.patient), serde_json::to_value(c).unwrap()).await;
        ensure!(status == StatusCode::OK, "complete: {status} {body}");
    }
    Ok(())
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn criterion_9_api_cli_parity() {
    let fixtures = [
        ("prostate", "prostate", 0),
        ("glioma", "glioma", 0),
        ("glioma", "glioma_nolab", 0),
        ("survival_conflict", "survival", 3),
        ("survival_ok", "survival", 0),
    ];
    let dir = tempfile::tempdir().unwrap();
    let mut result = Ok(());
    let mut files = 0usize;
    for (reg, jour, exit) in fixtures {
        let out = dir.path().join(format!("cli-{reg}-{jour}"));
        let status = Command::new(env!("CARGO_BIN_EXE_twin"))
            .arg("replay")
            .arg("--registry")
            .arg(fixture(&format!("{reg}.registry.json")))
            .arg("--journal")
            .arg(fixture(&format!("{jour}.journal.json")))
            .arg("--out")
            .arg(&out)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        if status.status.code() != Some(exit) {
            result = Err(format!("{jour}: CLI exit {:?}, expected {exit}", status.status.code()));
            break;
        }
        let http_root = dir.path().join(format!("http-{reg}-{jour}"));
        if let Err(e) = replay_over_http(&registry(reg), &journal(jour), &http_root).await {
            result = Err(format!("{jour}: {e}"));
            break;
        }
        let cli_tree = read_tree(&out.join("store"));
        let http_tree = read_tree(&http_root);
        if cli_tree.keys().ne(http_tree.keys()) {
            result = Err(format!("{jour}: file sets differ: {:?} vs {:?}", cli_tree.keys(), http_tree.keys()));
            break;
        }
        if let Some((path, _)) = cli_tree.iter().find(|(p, bytes)| http_tree[*p] != **bytes) {
            result = Err(format!("{jour}: {path} differs"));
            break;
        }
        files += cli_tree.len();
    }
    verdict(9, "API/CLI parity", result.map(|()| format!("{} fixture journals, {files} persisted files byte-identical", fixtures.len())));
}
