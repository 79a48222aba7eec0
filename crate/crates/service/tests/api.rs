use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use lams_core::episode::{Highlight, StateFrame};
use lams_core::events::{read_log, reconstruct, EndReason, Event, EventRecord};
use lams_core::gateway::mock::MockGateway;
use lams_core::gateway::{CompletionRequest, CompletionResult, Gateway, GatewayError, Role};
use lams_core::model::{ActionDirection, DirectionGroup};
use lams_core::sim::SessionClock;
use lams_service::session::{CreateSession, SessionHandle};
use lams_service::{recover_logs, router, Registry, ServiceConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

const SCRIPT: &str = r#"{"entries": [
  {"prompt_contains": ["**Example"], "rule_response": "1. Keep the gripper action in Group 2 while carrying."},
  {"distributions": {"Group 1": {"B": 0.9, "A": 0.1}, "Group 2": {"B": 1.0},
                     "Group 3": {"A": 1.0}, "Group 4": {"A": 1.0}}}
]}"#;

fn fast_config(dir: &Path, gateway: Option<Arc<dyn Gateway>>) -> ServiceConfig {
    let mut c = ServiceConfig::new(dir, gateway);
    c.clock = SessionClock::new(0.01, 0.15).unwrap();
    c.input_timeout = Duration::from_secs(10);
    c
}

fn mock() -> Arc<dyn Gateway> {
    Arc::new(MockGateway::from_json(SCRIPT).unwrap())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or(Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, v)
}

async fn wait_for(what: &str, mut f: impl FnMut() -> bool) {
    for _ in 0..500 {
        if f() {
            return;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("timed out waiting for {what}");
}

fn log_of(h: &SessionHandle) -> Vec<EventRecord> {
    read_log(std::io::BufReader::new(std::fs::File::open(&h.info.log_path).unwrap())).unwrap()
}

fn create_req(task: &str, strategy: &str) -> CreateSession {
    CreateSession {
        task: task.into(),
        strategy: strategy.into(),
        layout_seed: 7,
        shuffle_seed: None,
        run_id: None,
        trial_index: 1,
    }
}

#[tokio::test]
async fn unknown_task_and_missing_backend_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(Registry::new(fast_config(dir.path(), None)).unwrap());
    let (s, v) = call(&app, "POST", "/sessions", Some(json!({"task": "juggling", "strategy": "lams"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "unknown_task");
    let (s, v) = call(&app, "POST", "/sessions", Some(json!({"task": "water_pouring", "strategy": "magic"}))).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::BAD_REQUEST, Some("unknown_strategy")));
    let (s, v) = call(&app, "POST", "/sessions", Some(json!({"task": "water_pouring", "strategy": "lams"}))).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::BAD_REQUEST, Some("invalid_request")));
    let (s, v) = call(&app, "GET", "/sessions/nope", None).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::NOT_FOUND, Some("not_found")));
}

#[tokio::test]
async fn grouped_session_cycles_all_slots() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(Registry::new(fast_config(dir.path(), Some(mock()))).unwrap());
    let (s, created) = call(
        &app,
        "POST",
        "/sessions",
        Some(json!({"task": "book_storage", "strategy": "grouped_mapping"})),
    )
    .await;
    assert_eq!(s, StatusCode::CREATED);
    let id = created["id"].as_str().unwrap().to_string();
    let labels: Vec<&str> = created["frame"]["slots"].as_array().unwrap().iter().map(|s| s["label"].as_str().unwrap()).collect();
    assert_eq!(labels, ["A: Move forward", "A: Move backward", "A: Move left", "A: Move right"]);
    assert_eq!(created["frame"]["grouped_group"], 1);

    let (s, v) = call(&app, "POST", &format!("/sessions/{id}/grouped_cycle"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["group"], 2);
    assert_eq!(v["manual_switch_count"], 1);
    assert_eq!(v["mapping"]["up"], "move_up");
    assert_eq!(v["mapping"]["left"], "roll_left");

    let (s, v) = call(&app, "POST", &format!("/sessions/{id}/manual_switch"), Some(json!({"slot": "up"}))).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::CONFLICT, Some("wrong_strategy")));

    let (s, lams) = call(&app, "POST", "/sessions", Some(json!({"task": "book_storage", "strategy": "lams"}))).await;
    assert_eq!(s, StatusCode::CREATED);
    let (s, v) = call(&app, "POST", &format!("/sessions/{}/grouped_cycle", lams["id"].as_str().unwrap()), None).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::CONFLICT, Some("wrong_strategy")));
}

#[tokio::test]
async fn auto_switch_on_start_and_once_per_pause() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Registry::new(fast_config(dir.path(), Some(mock()))).unwrap();
    let h = reg.create(create_req("water_pouring", "lams")).unwrap();
    let (_, mut rx) = h.subscribe().unwrap();

    // the initial switch lands as a frame with an auto highlight on the up slot
    let frame = loop {
        let f = rx.recv().await.unwrap();
        if f.slots[0].highlight.is_some() {
            break f;
        }
    };
    assert_eq!(frame.slots[0].highlight, Some(Highlight::Auto));
    assert_eq!(frame.slots[0].direction, Some(ActionDirection::MoveUp));
    assert_eq!(frame.slots[1].highlight, Some(Highlight::Auto));
    assert_eq!(frame.slots[2].highlight, None);

    // idle for many pause windows: exactly one more switch
    tokio::time::sleep(Duration::from_millis(800)).await;
    let requests = log_of(&h)
        .iter()
        .filter(|r| matches!(r.event, Event::LlmRequest { role: Role::ModeSwitch, .. }))
        .count();
    assert_eq!(requests, 2);
    h.end().await.unwrap();
}

#[tokio::test]
async fn manual_switch_marks_slot_and_counts() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Registry::new(fast_config(dir.path(), Some(mock()))).unwrap();
    let app = router(Arc::clone(&reg));
    let h = reg.create(create_req("water_pouring", "static_llm")).unwrap();
    let id = h.info.id.clone();
    wait_for("initial switch", || log_of(&h).iter().any(|r| matches!(r.event, Event::AutoSwitch(_)))).await;
    // let the auto highlight frame go by
    tokio::time::sleep(Duration::from_millis(100)).await;

    let (_, mut rx) = h.subscribe().unwrap();
    let (s, v) = call(&app, "POST", &format!("/sessions/{id}/manual_switch"), Some(json!({"slot": "right"}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, json!({"slot": "right", "direction": "roll_right", "manual_switch_count": 1}));
    let f = loop {
        let f = rx.recv().await.unwrap();
        if f.manual_switch_count == 1 {
            break f;
        }
    };
    assert_eq!(f.slots[3].highlight, Some(Highlight::Manual));
    assert_eq!(f.slots[3].label, "B: Roll right");
    assert!(f.slots[..3].iter().all(|s| s.highlight.is_none()));
}

/// Blocks mode-switch calls until released.
struct Gate {
    open: Mutex<bool>,
    cv: std::sync::Condvar,
    inner: MockGateway,
}

impl Gateway for Gate {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        let mut open = self.open.lock().unwrap();
        while !*open {
            open = self.cv.wait(open).unwrap();
        }
        self.inner.complete(request)
    }
}

#[tokio::test]
async fn manual_switch_during_call_wins_its_slot() {
    let dir = tempfile::tempdir().unwrap();
    let gate = Arc::new(Gate {
        open: Mutex::new(false),
        cv: std::sync::Condvar::new(),
        inner: MockGateway::from_json(SCRIPT).unwrap(),
    });
    let reg = Registry::new(fast_config(dir.path(), Some(gate.clone()))).unwrap();
    let h = reg.create(create_req("water_pouring", "lams")).unwrap();
    wait_for("call in flight", || h.latest().llm_pending).await;

    // down: move backward -> move down, while the model is thinking
    let r = h.manual_switch(DirectionGroup::Down).await.unwrap();
    assert_eq!(r.direction, ActionDirection::MoveDown);
    let r = h.manual_switch(DirectionGroup::Down).await.unwrap();
    assert_eq!(r.direction, ActionDirection::PitchDown);
    *gate.open.lock().unwrap() = true;
    gate.cv.notify_all();

    wait_for("result applied", || !h.latest().llm_pending).await;
    let p = h.provenance().await.unwrap().expect("a switch happened");
    assert_eq!(p.kept_manual, vec![DirectionGroup::Down]);
    assert_eq!(p.mapping.get(DirectionGroup::Down), Some(ActionDirection::PitchDown));
    assert_eq!(p.mapping.get(DirectionGroup::Up), Some(ActionDirection::MoveUp));
    h.end().await.unwrap();
}

#[tokio::test]
async fn ended_session_is_closed() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(Registry::new(fast_config(dir.path(), None)).unwrap());
    let (_, created) = call(&app, "POST", "/sessions", Some(json!({"task": "water_pouring", "strategy": "heuristic"}))).await;
    let id = created["id"].as_str().unwrap();
    let (s, v) = call(&app, "POST", &format!("/sessions/{id}/end"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["reason"], "stopped");
    let (s, v) = call(&app, "POST", &format!("/sessions/{id}/input"), Some(json!({"lateral": 1.0, "longitudinal": 0.0}))).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::GONE, Some("session_closed")));
    let (s, _) = call(&app, "GET", &format!("/sessions/{id}/stream"), None).await;
    assert_eq!(s, StatusCode::GONE);
    let (s, v) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["ended"], "stopped");

    let (_, list) = call(&app, "GET", "/sessions", None).await;
    assert_eq!(list[0]["live"], false);
    let records = read_log(std::io::BufReader::new(std::fs::File::open(v_log(&list)).unwrap())).unwrap();
    assert!(matches!(records.last().unwrap().event, Event::TrialEnd { reason: EndReason::Stopped, .. }));
}

fn v_log(list: &Value) -> String {
    list[0]["log_path"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn input_rejects_non_finite_and_goes_stale() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = fast_config(dir.path(), None);
    cfg.input_timeout = Duration::from_millis(100);
    let reg = Registry::new(cfg).unwrap();
    let app = router(Arc::clone(&reg));
    let h = reg.create(create_req("water_pouring", "grouped_mapping")).unwrap();
    let id = &h.info.id;
    let (s, _) = call(&app, "POST", &format!("/sessions/{id}/input"), Some(json!({"lateral": "x", "longitudinal": 0}))).await;
    assert!(s.is_client_error());
    let (s, _) = call(&app, "POST", &format!("/sessions/{id}/input"), Some(json!({"lateral": 0.5, "longitudinal": 0.0}))).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    tokio::time::sleep(Duration::from_millis(400)).await;
    let inputs: Vec<(f64, u64)> = log_of(&h)
        .iter()
        .filter_map(|r| match r.event {
            Event::Input { lateral, .. } => Some((lateral, r.tick)),
            _ => None,
        })
        .collect();
    assert_eq!(inputs.len(), 2, "{inputs:?}");
    assert_eq!(inputs[0].0, 0.5);
    assert_eq!(inputs[1].0, 0.0);
    // the held input was released by the timeout, not by a command
    assert!(inputs[1].1 > inputs[0].1 + 5);
}

#[tokio::test]
async fn sse_stream_ends_with_the_final_frame() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Registry::new(fast_config(dir.path(), None)).unwrap();
    let app = router(Arc::clone(&reg));
    let h = reg.create(create_req("book_storage", "heuristic")).unwrap();
    let resp = app
        .clone()
        .oneshot(Request::get(format!("/sessions/{}/stream", h.info.id)).body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "text/event-stream");
    let h2 = h.clone();
    tokio::spawn(async move {
        tokio::time::sleep(Duration::from_millis(100)).await;
        h2.end().await.unwrap();
    });
    let body = tokio::time::timeout(Duration::from_secs(5), resp.into_body().collect())
        .await
        .expect("stream closes after the end")
        .unwrap()
        .to_bytes();
    let text = String::from_utf8(body.to_vec()).unwrap();
    let frames: Vec<StateFrame> = text
        .split("\n\n")
        .filter(|e| e.contains("event: frame"))
        .map(|e| {
            let data = e.lines().find_map(|l| l.strip_prefix("data: ")).unwrap();
            serde_json::from_str(data).unwrap()
        })
        .collect();
    assert!(frames.len() >= 2);
    assert!(frames.windows(2).all(|w| w[0].tick <= w[1].tick && w[0].log_len <= w[1].log_len));
    assert_eq!(frames.last().unwrap().ended, Some(EndReason::Stopped));
    assert!(frames[..frames.len() - 1].iter().all(|f| f.ended.is_none()));
}

#[tokio::test]
async fn every_frame_reconstructs_from_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Registry::new(fast_config(dir.path(), Some(mock()))).unwrap();
    let h = reg.create(create_req("water_pouring", "lams")).unwrap();
    let (first, mut rx) = h.subscribe().unwrap();
    let driver = h.clone();
    tokio::spawn(async move {
        use lams_core::model::UserAction;
        for k in 0..12 {
            let a = match k % 4 {
                0 => UserAction::new(0.0, 1.0),
                1 => UserAction::new(-0.6, 0.0),
                2 => UserAction::ZERO,
                _ => UserAction::new(0.3, -0.8),
            };
            driver.input(a).unwrap();
            if k == 5 {
                driver.manual_switch(DirectionGroup::Left).await.unwrap();
            }
            tokio::time::sleep(Duration::from_millis(70)).await;
        }
        driver.end().await.unwrap();
    });
    let mut frames = vec![first];
    loop {
        let f = rx.recv().await.unwrap();
        let done = f.ended.is_some();
        frames.push(f);
        if done {
            break;
        }
    }
    let records = log_of(&h);
    assert!(frames.len() > 50);
    for f in &frames {
        let prefix = &records[..f.log_len as usize];
        let r = reconstruct(prefix, Some(f.tick)).unwrap();
        assert_eq!(r.world, f.world, "world at tick {}", f.tick);
        let dirs: Vec<_> = f.slots.iter().map(|s| s.direction).collect();
        assert_eq!(dirs, r.mode.slots().map(|(_, d)| d).to_vec(), "mode at tick {}", f.tick);
        assert_eq!(r.manual_switch_count, f.manual_switch_count);
        assert_eq!(r.stages_reached, f.stage.reached);
        assert_eq!(r.end, f.ended);
    }
}

#[tokio::test]
async fn stores_persist_and_are_exclusive_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Registry::new(fast_config(dir.path(), Some(mock()))).unwrap();
    let mut req = create_req("water_pouring", "lams");
    req.run_id = Some("alice".into());
    let h = reg.create(req.clone()).unwrap();
    let busy = reg.create(req.clone()).err().expect("second session on the same stores");
    assert_eq!(busy.code(), "stores_busy");

    h.manual_switch(DirectionGroup::Up).await.unwrap();
    h.input(lams_core::model::UserAction::new(0.0, 0.5)).unwrap();
    wait_for("example saved", || {
        let path = dir.path().join("stores").join("water_pouring__alice.json");
        std::fs::read_to_string(path).is_ok_and(|t| t.contains("\"examples\"") && !t.contains("\"examples\": []"))
    })
    .await;
    h.end().await.unwrap();
    wait_for("stores released", || reg.create(req.clone()).is_ok()).await;
    let again = reg.list().into_iter().find(|(_, live)| *live).expect("new session");
    let h2 = reg.get(&again.0.id).unwrap();
    let s = h2.stores().await.unwrap();
    assert_eq!(s.run_id, "alice");
    assert_eq!(s.examples, 1);
    assert_eq!(s.rules, vec!["Keep the gripper action in Group 2 while carrying.".to_string()]);
}

#[tokio::test]
async fn recovery_marks_unfinished_trials_aborted() {
    let dir = tempfile::tempdir().unwrap();
    let reg = Registry::new(fast_config(dir.path(), None)).unwrap();
    let h = reg.create(create_req("water_pouring", "grouped_mapping")).unwrap();
    h.grouped_cycle().await.unwrap();
    tokio::time::sleep(Duration::from_millis(50)).await;
    // simulate a crash: copy the live log, plus a torn last line
    let crashed = dir.path().join("crashed.jsonl");
    let mut text = std::fs::read_to_string(&h.info.log_path).unwrap();
    text.push_str("{\"v\":1,\"seq\":99");
    std::fs::write(&crashed, text).unwrap();
    h.end().await.unwrap();

    let closed = recover_logs(dir.path()).unwrap();
    assert_eq!(closed, vec![crashed.clone()]);
    let records = read_log(std::io::BufReader::new(std::fs::File::open(&crashed).unwrap())).unwrap();
    match &records.last().unwrap().event {
        Event::TrialEnd { reason, manual_switch_count, .. } => {
            assert_eq!(*reason, EndReason::Aborted);
            assert_eq!(*manual_switch_count, 1);
        }
        other => panic!("last event {other:?}"),
    }
    assert!(records.windows(2).all(|w| w[1].seq == w[0].seq + 1));
    // already closed logs are left alone
    assert!(recover_logs(dir.path()).unwrap().is_empty());
}
