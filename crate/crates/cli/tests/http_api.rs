mod common;

use std::sync::Arc;
use std::time::Instant;

use ardm_cli::server::{router, ServerConfig};
use ardm_core::chat::{ChatConfig, SessionStore, DISCLOSURE};
use ardm_core::data::DialogRecord;
use ardm_core::{Preset, SamplerConfig};
use common::{bundle, chatty};
use reqwest::StatusCode;
use serde_json::{json, Value};

struct Server {
    base: String,
    client: reqwest::Client,
}

impl Server {
    async fn start(store: SessionStore) -> Server {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(async move {
            axum::serve(listener, router(Arc::new(store))).await.unwrap();
        });
        Server {
            base: format!("http://{addr}"),
            client: reqwest::Client::new(),
        }
    }

    async fn post(&self, path: &str, body: Value) -> (StatusCode, Value) {
        let r = self
            .client
            .post(format!("{}{path}", self.base))
            .json(&body)
            .send()
            .await
            .unwrap();
        (r.status(), r.json().await.unwrap())
    }

    async fn get(&self, path: &str) -> (StatusCode, Value) {
        let r = self.client.get(format!("{}{path}", self.base)).send().await.unwrap();
        (r.status(), r.json().await.unwrap())
    }

    async fn open(&self, preset: &str) -> String {
        let (s, body) = self
            .post("/sessions", json!({"checkpoint": "m", "preset": preset, "seed": 5}))
            .await;
        assert_eq!(s, StatusCode::CREATED, "{body}");
        body["id"].as_str().unwrap().to_string()
    }
}

fn store_with(b: ardm_core::bundle::Bundle, presets: Vec<Preset>) -> SessionStore {
    let s = SessionStore::new(ChatConfig {
        checkpoint_dir: "/nonexistent".into(),
        presets,
        ..ChatConfig::default()
    })
    .unwrap();
    s.insert_checkpoint("m", b);
    s
}

fn short() -> Preset {
    Preset {
        name: "short".into(),
        sampler: SamplerConfig {
            top_p: 0.9,
            temperature: 0.7,
            max_utterance_tokens: 10,
            ..SamplerConfig::default()
        },
        system_first: false,
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn healthz_reports_ok() {
    let srv = Server::start(store_with(bundle(256, 8), vec![])).await;
    let (s, body) = srv.get("/healthz").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body["status"], "ok");
    assert_eq!(body["sessions"], 0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn conversation_round_trip() {
    let srv = Server::start(store_with(bundle(512, 8), vec![short()])).await;
    let (s, opened) = srv
        .post("/sessions", json!({"checkpoint": "m", "preset": "short"}))
        .await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(opened["disclosure"], DISCLOSURE);
    assert_eq!(opened["turns"], json!([]));
    let id = opened["id"].as_str().unwrap();

    let mut replies = Vec::new();
    for (i, text) in ["i want a cheap restaurant", "what is the phone number ?"]
        .iter()
        .enumerate()
    {
        let (s, body) = srv
            .post(&format!("/sessions/{id}/messages"), json!({ "text": text }))
            .await;
        assert_eq!(s, StatusCode::OK, "{body}");
        assert_eq!(body["turn_index"], 2 * i + 1);
        replies.push(body["reply"].as_str().unwrap().to_string());
    }

    let (s, history) = srv.get(&format!("/sessions/{id}/history")).await;
    assert_eq!(s, StatusCode::OK);
    let turns = history["turns"].as_array().unwrap();
    assert_eq!(turns.len(), 4);
    assert_eq!(turns[0]["text"], "i want a cheap restaurant");
    assert_eq!(turns[1]["role"], "system");
    assert_eq!(turns[1]["text"], replies[0].as_str());
    assert_eq!(turns[3]["text"], replies[1].as_str());

    let (s, export) = srv.get(&format!("/sessions/{id}/export")).await;
    assert_eq!(s, StatusCode::OK);
    let record: DialogRecord = serde_json::from_value(export).unwrap();
    assert_eq!(record.id, id);
    assert_eq!(record.turns.len(), 4);

    let (_, health) = srv.get("/healthz").await;
    assert_eq!(health["sessions"], 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn errors_map_to_status_codes() {
    let srv = Server::start(store_with(bundle(256, 8), vec![])).await;
    let (s, body) = srv.post("/sessions", json!({"checkpoint": "nope"})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert!(body["error"].as_str().unwrap().contains("nope"));
    let (s, _) = srv
        .post("/sessions", json!({"checkpoint": "m", "preset": "loud"}))
        .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = srv.post("/sessions", json!({"preset": "default"})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = srv.get("/sessions/missing/history").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = srv.get("/sessions/missing/export").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = srv.post("/sessions/missing/messages", json!({"text": "hi"})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let id = srv.open("default").await;
    let (s, _) = srv
        .post(&format!("/sessions/{id}/messages"), json!({"text": "two\nlines"}))
        .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = srv
        .post(&format!("/sessions/{id}/messages"), json!({"words": "hi"}))
        .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let raw = srv
        .client
        .post(format!("{}/sessions/{id}/messages", srv.base))
        .header("content-type", "application/json")
        .body("{not json")
        .send()
        .await
        .unwrap();
    assert_eq!(raw.status(), StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn persuasion_sessions_open_with_a_system_turn() {
    let srv = Server::start(store_with(bundle(512, 8), vec![])).await;
    let (s, body) = srv
        .post(
            "/sessions",
            json!({"checkpoint": "m", "preset": "persuasion", "seed": 1}),
        )
        .await;
    assert_eq!(s, StatusCode::CREATED);
    let turns = body["turns"].as_array().unwrap();
    assert_eq!(turns.len(), 1);
    assert_eq!(turns[0]["role"], "system");
    assert_eq!(turns[0]["turn_index"], 0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn full_sessions_answer_conflict() {
    let srv = Server::start(store_with(chatty(bundle(40, 8)), vec![])).await;
    let id = srv.open("default").await;
    let mut statuses = Vec::new();
    for _ in 0..4 {
        let (s, body) = srv
            .post(&format!("/sessions/{id}/messages"), json!({"text": "hello"}))
            .await;
        statuses.push(s);
        if s == StatusCode::CONFLICT {
            assert!(body["error"].as_str().unwrap().contains("context limit"));
            break;
        }
    }
    assert_eq!(statuses.last(), Some(&StatusCode::CONFLICT), "{statuses:?}");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_posts_to_one_session_admit_one() {
    let long = Preset {
        name: "long".into(),
        sampler: SamplerConfig {
            max_utterance_tokens: 600,
            ..SamplerConfig::default()
        },
        system_first: false,
    };
    let srv = Arc::new(Server::start(store_with(chatty(bundle(1024, 32)), vec![long])).await);
    for _ in 0..10 {
        let id = srv.open("long").await;
        let path = format!("/sessions/{id}/messages");
        let send = |text: &'static str| {
            let (srv, path) = (srv.clone(), path.clone());
            tokio::spawn(async move {
                let start = Instant::now();
                let (s, _) = srv.post(&path, json!({ "text": text })).await;
                (start, Instant::now(), s)
            })
        };
        let (a, b) = (send("first"), send("second"));
        let (a, b) = (a.await.unwrap(), b.await.unwrap());
        let overlapped = a.0 < b.1 && b.0 < a.1;
        if a.2 == StatusCode::OK && b.2 == StatusCode::OK {
            assert!(!overlapped, "two overlapping posts admitted");
            continue;
        }
        let mut codes = [a.2, b.2];
        codes.sort();
        assert_eq!(codes, [StatusCode::OK, StatusCode::CONFLICT]);
        let (_, h) = srv.get(&format!("/sessions/{id}/history")).await;
        assert_eq!(h["turns"].as_array().unwrap().len(), 2);
        return;
    }
    panic!("no overlapping attempt in 10 tries");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn cors_headers_are_present() {
    let srv = Server::start(store_with(bundle(256, 8), vec![])).await;
    let r = srv
        .client
        .get(format!("{}/healthz", srv.base))
        .header("origin", "http://localhost:5173")
        .send()
        .await
        .unwrap();
    assert_eq!(r.headers()["access-control-allow-origin"], "*");
    let pre = srv
        .client
        .request(reqwest::Method::OPTIONS, format!("{}/sessions", srv.base))
        .header("origin", "http://localhost:5173")
        .header("access-control-request-method", "POST")
        .send()
        .await
        .unwrap();
    assert!(pre.status().is_success());
    assert!(pre.headers().contains_key("access-control-allow-methods"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn checkpoints_load_from_the_configured_directory() {
    let dir = tempfile::tempdir().unwrap();
    bundle(256, 8).save(dir.path().join("small")).unwrap();
    let transcripts = dir.path().join("logs");
    let store = SessionStore::new(ChatConfig {
        checkpoint_dir: dir.path().to_path_buf(),
        transcript_dir: Some(transcripts.clone()),
        ..ChatConfig::default()
    })
    .unwrap();
    let srv = Server::start(store).await;
    let (s, body) = srv.post("/sessions", json!({"checkpoint": "small"})).await;
    assert_eq!(s, StatusCode::CREATED, "{body}");
    let id = body["id"].as_str().unwrap();
    let (s, _) = srv
        .post(&format!("/sessions/{id}/messages"), json!({"text": "hello"}))
        .await;
    assert_eq!(s, StatusCode::OK);
    let log = std::fs::read_to_string(transcripts.join(format!("{id}.jsonl"))).unwrap();
    assert_eq!(log.lines().count(), 3);
    for name in ["../small", "logs", "missing"] {
        let (s, _) = srv.post("/sessions", json!({ "checkpoint": name })).await;
        assert_eq!(s, StatusCode::NOT_FOUND, "{name}");
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn presets_are_listed() {
    let srv = Server::start(store_with(bundle(256, 8), vec![short()])).await;
    let (s, body) = srv.get("/presets").await;
    assert_eq!(s, StatusCode::OK);
    let names: Vec<&str> = body["presets"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["name"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["default", "camrest", "persuasion", "short"]);
    assert_eq!(body["presets"][1]["sampler"]["top_p"], 0.2);
}

#[test]
fn server_config_reads_json_then_environment() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("server.json");
    std::fs::write(
        &path,
        r#"{"port": 9000, "chat": {"checkpoint_dir": "ck", "presets": [{"name": "p", "sampler": {"top_p": 0.5, "top_k": null, "temperature": 1.0, "max_utterance_tokens": 5, "seed": 0}, "system_first": false}]}}"#,
    )
    .unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut cfg: ServerConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(cfg.host, "127.0.0.1");
    assert_eq!(cfg.port, 9000);
    assert_eq!(cfg.chat.presets[0].name, "p");
    let env = |k: &str| match k {
        "ARDM_PORT" => Some("9100".to_string()),
        "ARDM_TRANSCRIPT_DIR" => Some("/tmp/t".to_string()),
        "ARDM_SEED" => Some("12".to_string()),
        _ => None,
    };
    cfg.apply_env(env).unwrap();
    assert_eq!(cfg.port, 9100);
    assert_eq!(cfg.chat.checkpoint_dir, std::path::PathBuf::from("ck"));
    assert_eq!(cfg.chat.transcript_dir, Some("/tmp/t".into()));
    assert_eq!(cfg.chat.seed, 12);
    assert_eq!(cfg.addr().unwrap().port(), 9100);
    assert!(cfg
        .apply_env(|k| (k == "ARDM_PORT").then(|| "high".to_string()))
        .is_err());
}
