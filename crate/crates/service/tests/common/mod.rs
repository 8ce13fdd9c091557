#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use proptest::prelude::*;
use serde_json::{json, Value};
use tower::ServiceExt;

use ibn_service::api::router;
use ibn_service::backend::{Lexicon, LexiconBackend};
use ibn_service::engine::{Engine, EngineConfig, IntentRecord, IntentState, Snapshot};
use ibn_service::inventory::Inventory;

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

pub async fn call_raw(app: &Router, method: &str, uri: &str, body: &'static str) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

pub fn lexicon() -> Lexicon {
    Lexicon::from_pairs([
        ("cisco", "VENDOR"),
        ("juniper", "VENDOR"),
        ("routers", "DEVICE"),
        ("switches", "DEVICE"),
        ("gateway", "DEVICE"),
        ("up", "STATE"),
        ("paris", "LOCATION"),
    ])
}

pub fn lexicon_engine(dir: Option<&Path>, initial: bool) -> Arc<Engine<LexiconBackend>> {
    let backend = LexiconBackend {
        confidence: 0.95,
        poison: Some("boom".into()),
    };
    Arc::new(
        Engine::open(
            backend,
            initial.then(lexicon),
            EngineConfig::default(),
            Inventory::default(),
            dir,
        )
        .unwrap(),
    )
}

pub const TEXTS: [&str; 7] = [
    "Show me Cisco routers up",
    "zzqx qq",
    "Count juniper switches in paris",
    "Show acmenet routers",
    "configure boom gateway",
    "   ",
    "Show me Cisco routers. Count Juniper switches.",
];

pub const GROUPS: [&str; 9] = [
    "VENDOR", "DEVICE", "STATE", "DURATION", "LOCATION", "VLAN_ID", "COUNT", "METRIC", "PERSON",
];

#[derive(Clone, Debug)]
pub enum Op {
    Submit(usize),
    Correct { pick: usize, spans: Vec<(usize, usize, usize, usize)> },
    Activate(usize),
    Retrain,
    Get(usize),
    List(Option<usize>),
    Restart,
}

pub fn op_strategy() -> impl Strategy<Value = Op> {
    prop_oneof![
        4 => (0..TEXTS.len()).prop_map(Op::Submit),
        5 => (any::<usize>(), prop::collection::vec((0usize..2, 0usize..5, 0usize..3, 0..GROUPS.len()), 0..3))
            .prop_map(|(pick, spans)| Op::Correct { pick, spans }),
        2 => any::<usize>().prop_map(Op::Activate),
        1 => Just(Op::Retrain),
        1 => any::<usize>().prop_map(Op::Get),
        1 => prop::option::of(0usize..6).prop_map(Op::List),
        1 => Just(Op::Restart),
    ]
}

pub fn ops_strategy() -> impl Strategy<Value = Vec<Op>> {
    prop::collection::vec(op_strategy(), 1..25)
}

fn state_of(v: &Value) -> IntentState {
    serde_json::from_value(v["state"].clone()).unwrap()
}

/// Drives one operation sequence through the HTTP API against a fresh data
/// directory and checks the lifecycle invariants along the way.
pub async fn run_sequence(ops: &[Op]) -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut engine = lexicon_engine(Some(dir.path()), true);
    let mut app = router(engine.clone());
    let mut known: BTreeMap<String, IntentState> = BTreeMap::new();
    let mut ids: Vec<String> = Vec::new();
    let mut accepted_keys: BTreeSet<String> = BTreeSet::new();
    let mut poisoned = false;
    let mut versions = 1usize;

    macro_rules! ensure {
        ($cond:expr, $($msg:tt)*) => {
            if !$cond {
                return Err(format!($($msg)*));
            }
        };
    }

    for op in ops {
        match op {
            Op::Submit(i) => {
                let (status, body) = call(&app, "POST", "/api/intents", Some(json!({"text": TEXTS[*i]}))).await;
                if TEXTS[*i].trim().is_empty() {
                    ensure!(status == StatusCode::UNPROCESSABLE_ENTITY, "empty text gave {status}");
                    continue;
                }
                ensure!(status == StatusCode::CREATED, "submit gave {status}: {body}");
                let st = state_of(&body);
                ensure!(
                    matches!(st, IntentState::Translated | IntentState::NeedsRefinement),
                    "submit landed in {st:?}"
                );
                let id = body["id"].as_str().unwrap().to_string();
                ensure!(!known.contains_key(&id), "duplicate id {id}");
                known.insert(id.clone(), st);
                ids.push(id);
            }
            Op::Correct { pick, spans } => {
                let spans_json: Vec<Value> = spans
                    .iter()
                    .map(|&(s, start, len, g)| {
                        json!({"sentence": s, "token_start": start, "token_end": start + len, "group": GROUPS[g]})
                    })
                    .collect();
                let body = json!({"spans": spans_json, "author": "prop"});
                let Some(id) = (!ids.is_empty()).then(|| ids[pick % ids.len()].clone()) else {
                    let (status, _) = call(&app, "POST", "/api/intents/int-999999/corrections", Some(body)).await;
                    ensure!(status == StatusCode::NOT_FOUND, "correction on missing id gave {status}");
                    continue;
                };
                let prior = known[&id];
                let (status, resp) = call(&app, "POST", &format!("/api/intents/{id}/corrections"), Some(body)).await;
                if !matches!(prior, IntentState::NeedsRefinement | IntentState::Translated) {
                    ensure!(status == StatusCode::CONFLICT, "correction from {prior:?} gave {status}");
                    continue;
                }
                match status {
                    StatusCode::OK => {
                        let st = state_of(&resp);
                        let expect = if spans.is_empty() {
                            IntentState::NeedsRefinement
                        } else {
                            IntentState::Translated
                        };
                        ensure!(st == expect, "correction moved {prior:?} to {st:?}");
                        let key = resp["corrections"].as_array().unwrap().last().unwrap()["key"]
                            .as_str()
                            .unwrap()
                            .to_string();
                        poisoned |= resp["text"].as_str().unwrap().contains("boom");
                        accepted_keys.insert(key);
                        known.insert(id, st);
                    }
                    StatusCode::CONFLICT => {
                        ensure!(
                            spans.is_empty() && prior == IntentState::Translated,
                            "unexpected conflict for {spans:?} from {prior:?}: {resp}"
                        );
                    }
                    StatusCode::UNPROCESSABLE_ENTITY => {}
                    other => return Err(format!("correction gave {other}: {resp}")),
                }
            }
            Op::Activate(pick) => {
                let Some(id) = (!ids.is_empty()).then(|| ids[pick % ids.len()].clone()) else {
                    continue;
                };
                let prior = known[&id];
                let (status, resp) = call(&app, "POST", &format!("/api/intents/{id}/activate"), None).await;
                if prior != IntentState::Translated {
                    ensure!(status == StatusCode::CONFLICT, "activate from {prior:?} gave {status}");
                    continue;
                }
                ensure!(status == StatusCode::OK, "activate gave {status}: {resp}");
                let st = state_of(&resp);
                ensure!(
                    matches!(st, IntentState::Activated | IntentState::Failed),
                    "activate landed in {st:?}"
                );
                known.insert(id, st);
            }
            Op::Retrain => {
                let (status, resp) = call(&app, "POST", "/api/model/retrain", None).await;
                if accepted_keys.is_empty() {
                    ensure!(status == StatusCode::CONFLICT, "retrain on empty dataset gave {status}");
                } else if poisoned {
                    ensure!(status == StatusCode::INTERNAL_SERVER_ERROR, "poisoned retrain gave {status}");
                } else {
                    ensure!(status == StatusCode::CREATED, "retrain gave {status}: {resp}");
                    versions += 1;
                    ensure!(resp["id"] == json!(format!("v{versions}")), "new version {}", resp["id"]);
                }
            }
            Op::Get(pick) => {
                if ids.is_empty() {
                    let (status, _) = call(&app, "GET", "/api/intents/int-000001", None).await;
                    ensure!(status == StatusCode::NOT_FOUND, "get on empty store gave {status}");
                    continue;
                }
                let id = &ids[pick % ids.len()];
                let (status, resp) = call(&app, "GET", &format!("/api/intents/{id}"), None).await;
                ensure!(status == StatusCode::OK, "get gave {status}");
                ensure!(state_of(&resp) == known[id], "stored state differs for {id}");
            }
            Op::List(filter) => {
                let state = filter.map(|i| IntentState::ALL[i]);
                let uri = match state {
                    Some(s) => format!("/api/intents?state={}", serde_json::to_value(s).unwrap().as_str().unwrap()),
                    None => "/api/intents".into(),
                };
                let (status, resp) = call(&app, "GET", &uri, None).await;
                ensure!(status == StatusCode::OK, "list gave {status}");
                let expect = known.values().filter(|s| state.is_none_or(|f| **s == f)).count();
                ensure!(resp.as_array().unwrap().len() == expect, "list {uri} count mismatch");
            }
            Op::Restart => {
                let before = engine.snapshot();
                drop(app);
                drop(engine);
                engine = lexicon_engine(Some(dir.path()), false);
                app = router(engine.clone());
                ensure!(engine.snapshot() == before, "restart changed state");
            }
        }
    }

    let live = engine.snapshot();
    for r in live.intents.values() {
        ensure!(r.history_is_legal(), "illegal history for {}: {:?}", r.id, r.history);
        ensure!(known.get(&r.id) == Some(&r.state), "state of {} diverged", r.id);
    }
    let keys: Vec<&String> = live.corrections.iter().map(|c| &c.key).collect();
    ensure!(keys.len() == accepted_keys.len(), "dataset has {} entries, accepted {}", keys.len(), accepted_keys.len());
    ensure!(keys.iter().all(|k| accepted_keys.contains(*k)), "dataset key mismatch");
    ensure!(live.registry.versions.len() == versions, "registry has {} versions", live.registry.versions.len());
    let replayed = Snapshot::load(dir.path()).map_err(|e| e.to_string())?;
    ensure!(replayed == live, "event-log replay differs from memory");
    Ok(())
}

pub fn record(v: &Value) -> IntentRecord {
    serde_json::from_value(v.clone()).unwrap()
}
