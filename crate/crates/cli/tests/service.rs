//! HTTP API behaviour against a keyword stub and against real checkpoints.

use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use empathy_cli::service::{load_pipeline, router, AppState, ModelHash, Predictor, DEFAULT_MAX_BODY_BYTES};
use empathy_core::fixtures::demo_corpus;
use empathy_core::labels::{Level, Mechanism, Span};
use empathy_core::text::{encode_pair, Vocabulary};
use empathy_core::train::checkpoint::{file_digest, save_model, CheckpointMeta};
use empathy_core::{train::train, BiEncoderModel, EncoderConfig, FeedbackTemplateSet, ModelFlags, Prediction, TrainConfig};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

/// Phrase rules per mechanism: (phrase, level). The first match wins.
const RULES: [&[(&str, Level)]; 3] = [
    &[("sad for you", Level::Strong), ("hang in there", Level::Weak)],
    &[("must be terrible", Level::Strong), ("I understand", Level::Weak)],
    &[("alone right now?", Level::Strong), ("what happened?", Level::Weak)],
];

struct Stub {
    delay: Duration,
}

impl Predictor for Stub {
    fn predict(&self, _seeker: &str, response: &str) -> empathy_core::Result<Vec<Prediction>> {
        std::thread::sleep(self.delay);
        if response.contains("explode") {
            return Err(empathy_core::Error::Empty("secret internal detail"));
        }
        Ok(Mechanism::ALL
            .into_iter()
            .map(|m| {
                let hit = RULES[m.index()]
                    .iter()
                    .find_map(|(p, l)| response.find(p).map(|i| (Span::new(i, i + p.len()), *l)));
                let (spans, level) = match hit {
                    Some((s, l)) => (vec![s], l),
                    None => (vec![], Level::None),
                };
                let mut probs = [0.1; 3];
                probs[level.index()] = 0.8;
                Prediction {
                    mechanism: m,
                    level,
                    level_probs: probs,
                    rationale_mask: vec![],
                    rationale_spans: spans,
                }
            })
            .collect())
    }

    fn model_hashes(&self) -> Vec<ModelHash> {
        Mechanism::ALL
            .into_iter()
            .map(|m| ModelHash {
                mechanism: m,
                sha256: format!("stub-{}", m.code()),
            })
            .collect()
    }
}

fn app_with(predictor: Arc<dyn Predictor>, timeout: Duration, limit: usize) -> Router {
    router(
        AppState {
            predictor,
            templates: Arc::new(FeedbackTemplateSet::default()),
            timeout,
        },
        limit,
    )
}

fn app() -> Router {
    app_with(Arc::new(Stub { delay: Duration::ZERO }), Duration::from_secs(5), DEFAULT_MAX_BODY_BYTES)
}

async fn call(app: &Router, method: &str, path: &str, body: impl Into<Body>) -> (StatusCode, String, Option<String>) {
    let req = Request::builder()
        .method(method)
        .uri(path)
        .header("content-type", "application/json")
        .body(body.into())
        .unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let ctype = res
        .headers()
        .get("content-type")
        .map(|v| v.to_str().unwrap().to_string());
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    (status, String::from_utf8(bytes.to_vec()).unwrap(), ctype)
}

async fn post(app: &Router, path: &str, body: Value) -> (StatusCode, Value) {
    let (s, b, _) = call(app, "POST", path, body.to_string()).await;
    (s, serde_json::from_str(&b).unwrap())
}

#[tokio::test]
async fn health_reports_model_hashes() {
    let (status, body, ctype) = call(&app(), "GET", "/health", Body::empty()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ctype.as_deref(), Some("application/json"));
    let v: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(v["status"], "ok");
    assert_eq!(v["models"][1], json!({"mechanism": "interpretations", "sha256": "stub-ip"}));
}

#[tokio::test]
async fn empty_response_is_rejected_by_name() {
    for path in ["/predict", "/feedback"] {
        let (s, v) = post(&app(), path, json!({"seeker": "help", "response": ""})).await;
        assert_eq!(s, StatusCode::BAD_REQUEST);
        assert_eq!(v["error"], "response must be nonempty");
        assert_eq!(v["field"], "response");
    }
}

#[tokio::test]
async fn malformed_bodies_name_the_field() {
    let a = app();
    let cases = [
        (json!({"response": "hi"}), Some("seeker"), "seeker is required"),
        (json!({"seeker": "x", "response": 3}), Some("response"), "response must be a string"),
        (json!({"seeker": "  ", "response": "hi"}), Some("seeker"), "seeker must be nonempty"),
        (json!({"seeker": "x", "response": "y", "previous_response": ""}), Some("previous_response"), "previous_response must be nonempty"),
        (json!({"seeker": "x", "response": "y", "extra": 1}), None, "unknown field \"extra\""),
        (json!(["seeker"]), None, "body must be a JSON object"),
    ];
    for (body, field, msg) in cases {
        let (s, v) = post(&a, "/feedback", body).await;
        assert_eq!(s, StatusCode::BAD_REQUEST);
        assert_eq!(v["error"], msg);
        assert_eq!(v["field"], json!(field));
    }
    let (s, v) = post(&a, "/predict", json!({"seeker": "x", "response": "y", "previous_response": "z"})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("previous_response"));
    let (s, body, _) = call(&a, "POST", "/predict", "{not json").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(body.contains("not valid JSON"));
}

#[tokio::test]
async fn oversized_body_gets_413() {
    let a = app_with(Arc::new(Stub { delay: Duration::ZERO }), Duration::from_secs(5), 256);
    let big = json!({"seeker": "x", "response": "y".repeat(300)});
    let (s, v) = post(&a, "/predict", big).await;
    assert_eq!(s, StatusCode::PAYLOAD_TOO_LARGE);
    assert!(v["error"].is_string());
    let (s, _) = post(&a, "/predict", json!({"seeker": "x", "response": "y"})).await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn internal_errors_are_opaque() {
    let (s, v) = post(&app(), "/predict", json!({"seeker": "x", "response": "this will explode"})).await;
    assert_eq!(s, StatusCode::INTERNAL_SERVER_ERROR);
    assert_eq!(v["error"], "internal error");
    assert_eq!(v["id"].as_str().unwrap().len(), 36);
    assert!(!v.to_string().contains("secret"));
}

#[tokio::test]
async fn slow_inference_times_out() {
    let a = app_with(Arc::new(Stub { delay: Duration::from_millis(300) }), Duration::from_millis(20), 1024);
    let (s, v) = post(&a, "/predict", json!({"seeker": "x", "response": "y"})).await;
    assert_eq!(s, StatusCode::GATEWAY_TIMEOUT);
    assert_eq!(v["error"], "inference timed out");
}

#[tokio::test]
async fn predict_spans_slice_back_to_their_text() {
    let response = "Ça va? I feel so sad for you 💙 that must be terrible. Are you alone right now?";
    let (s, v) = post(&app(), "/predict", json!({"seeker": "I can't cope", "response": response})).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["total_score"], 6);
    let mut seen = 0;
    for m in v["mechanisms"].as_array().unwrap() {
        assert_eq!(m["probs"].as_array().unwrap().len(), 3);
        for sp in m["spans"].as_array().unwrap() {
            let (a, b) = (sp["start"].as_u64().unwrap() as usize, sp["end"].as_u64().unwrap() as usize);
            assert_eq!(&response[a..b], sp["text"].as_str().unwrap());
            seen += 1;
        }
    }
    assert_eq!(seen, 3);
    assert_eq!(v["mechanisms"][0]["spans"][0]["text"], "sad for you");
}

#[tokio::test]
async fn feedback_is_deterministic() {
    let a = app();
    let body = json!({"seeker": "I failed again", "response": "hang in there, what happened?"}).to_string();
    let (s1, b1, _) = call(&a, "POST", "/feedback", body.clone()).await;
    let (s2, b2, _) = call(&a, "POST", "/feedback", body).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(b1, b2);
    let v: Value = serde_json::from_str(&b1).unwrap();
    assert_eq!(v["total_score"], 2);
    assert!(v.get("score_delta").is_none());
    for q in v["items"].as_array().unwrap().iter().flat_map(|i| i["quotes"].as_array().unwrap()) {
        let (a, b) = (q["span"]["start"].as_u64().unwrap() as usize, q["span"]["end"].as_u64().unwrap() as usize);
        assert_eq!(&"hang in there, what happened?"[a..b], q["text"].as_str().unwrap());
    }
}

#[tokio::test]
async fn feedback_reports_score_delta_against_previous_draft() {
    let (s, v) = post(
        &app(),
        "/feedback",
        json!({
            "seeker": "My job is killing me.",
            "previous_response": "hang in there",
            "response": "I am so sad for you, that must be terrible."
        }),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["previous_total_score"], 1);
    assert_eq!(v["total_score"], 4);
    assert_eq!(v["score_delta"], 3);
    assert_eq!(v["offer_rewrite"], false);
}

#[tokio::test]
async fn concurrent_identical_requests_get_identical_bodies() {
    let a = app();
    let body = json!({"seeker": "x", "response": "I understand, hang in there"}).to_string();
    let tasks: Vec<_> = (0..16)
        .map(|_| {
            let a = a.clone();
            let body = body.clone();
            tokio::spawn(async move { call(&a, "POST", "/predict", body).await.1 })
        })
        .collect();
    let mut bodies = Vec::new();
    for t in tasks {
        bodies.push(t.await.unwrap());
    }
    assert!(bodies.windows(2).all(|w| w[0] == w[1]));
}

#[tokio::test]
async fn unknown_route_and_method() {
    let (s, _, _) = call(&app(), "GET", "/nope", Body::empty()).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _, _) = call(&app(), "GET", "/predict", Body::empty()).await;
    assert_eq!(s, StatusCode::METHOD_NOT_ALLOWED);
}

fn tiny_model(m: Mechanism, vocab: &Vocabulary, seed: u64) -> BiEncoderModel<f32> {
    let mut c = EncoderConfig::toy(vocab.len());
    c.num_layers = 1;
    c.model_dim = 16;
    c.ff_dim = 32;
    c.max_len = 24;
    BiEncoderModel::with_config(m, c, ModelFlags::default(), seed).unwrap()
}

#[tokio::test]
async fn real_checkpoints_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = demo_corpus(24, 7);
    let vocab = Vocabulary::build(corpus.iter().flat_map(|p| [p.seeker.as_str(), p.response.as_str()]), 1);
    let vocab_path = dir.path().join("vocab.txt");
    vocab.save(&vocab_path).unwrap();
    let data: Vec<_> = corpus.iter().map(|p| encode_pair(p, &vocab, 24).unwrap()).collect();
    let config = TrainConfig {
        epochs: 2,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let mut paths = Vec::new();
    for m in Mechanism::ALL {
        let trained = train(&data, &[], tiny_model(m, &vocab, m.index() as u64), &config).unwrap();
        let p = dir.path().join(format!("{}.ckpt", m.code()));
        save_model(&p, &trained.model, &CheckpointMeta::default(), &vocab.hash()).unwrap();
        paths.push(p);
    }
    let loaded = load_pipeline(&vocab_path, [&paths[0], &paths[1], &paths[2]]).unwrap();
    let digests: Vec<String> = paths.iter().map(|p| file_digest(p).unwrap()).collect();
    let a = app_with(Arc::new(loaded), Duration::from_secs(10), DEFAULT_MAX_BODY_BYTES);

    let (_, body, _) = call(&a, "GET", "/health", Body::empty()).await;
    let v: Value = serde_json::from_str(&body).unwrap();
    for (i, d) in digests.iter().enumerate() {
        assert_eq!(v["models"][i]["sha256"], json!(d));
        assert_eq!(v["models"][i]["mechanism"], json!(Mechanism::ALL[i]));
    }

    let response = corpus[3].response.clone() + " — ünïcödé tail";
    let req = json!({"seeker": corpus[3].seeker, "response": response});
    let (s, b1, _) = call(&a, "POST", "/predict", req.to_string()).await;
    let (_, b2, _) = call(&a, "POST", "/predict", req.to_string()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(b1, b2);
    let v: Value = serde_json::from_str(&b1).unwrap();
    let mut total = 0;
    for m in v["mechanisms"].as_array().unwrap() {
        total += m["level"].as_u64().unwrap();
        let p: f64 = m["probs"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
        assert!((p - 1.0).abs() < 1e-5);
        for sp in m["spans"].as_array().unwrap() {
            let (x, y) = (sp["start"].as_u64().unwrap() as usize, sp["end"].as_u64().unwrap() as usize);
            assert_eq!(&response[x..y], sp["text"].as_str().unwrap());
        }
    }
    assert_eq!(v["total_score"], total);

    let swapped = load_pipeline(&vocab_path, [&paths[1], &paths[0], &paths[2]]);
    assert!(swapped.err().unwrap().to_string().contains("expected emotional_reactions"));
    let other = Vocabulary::build(["entirely different words"], 1);
    let other_path = dir.path().join("other.txt");
    other.save(&other_path).unwrap();
    assert!(load_pipeline(&other_path, [&paths[0], &paths[1], &paths[2]]).is_err());
}
