//! Predictions from a trained artifact, in process or over HTTP.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use tokio::sync::Semaphore;
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::artifact::{argmax, Artifact, ArtifactError};
use crate::taxonomy::{taxonomy, Fallacy};

/// Bumped when the JSON shape of a response changes.
pub const API_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum InferenceError {
    #[error("text is empty")]
    EmptyText,
    #[error("artifact is corrupt: {0}")]
    ArtifactCorrupt(String),
    #[error("artifact format {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("text {index}: {source}")]
    Batch {
        index: usize,
        #[source]
        source: Box<InferenceError>,
    },
    #[error("model failure: {0}")]
    Model(String),
    #[error("cannot bind {addr}: {source}")]
    BindFailure {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("server stopped: {0}")]
    Server(std::io::Error),
}

impl From<ArtifactError> for InferenceError {
    fn from(e: ArtifactError) -> Self {
        match e {
            ArtifactError::VersionMismatch { found, expected } => InferenceError::VersionMismatch { found, expected },
            ArtifactError::Corrupt { .. } | ArtifactError::Io { .. } => InferenceError::ArtifactCorrupt(e.to_string()),
            ArtifactError::Model(e) => InferenceError::Model(e.to_string()),
        }
    }
}

impl InferenceError {
    pub fn code(&self) -> &'static str {
        match self {
            InferenceError::EmptyText => "EmptyText",
            InferenceError::ArtifactCorrupt(_) => "ArtifactCorrupt",
            InferenceError::VersionMismatch { .. } => "VersionMismatch",
            InferenceError::Batch { source, .. } => source.code(),
            InferenceError::Model(_) => "ModelError",
            InferenceError::BindFailure { .. } => "BindFailure",
            InferenceError::Server(_) => "ServerError",
        }
    }
}

pub type Result<T, E = InferenceError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: Fallacy,
    /// Softmax probability per label, in canonical order.
    pub scores: BTreeMap<Fallacy, f64>,
    pub model_version: String,
    /// SHA-256 of the input text as received.
    pub input_hash: String,
}

/// A loaded artifact. Immutable, so one instance can serve many threads.
#[derive(Debug)]
pub struct Predictor {
    artifact: Artifact,
}

pub fn load_predictor(path: &Path) -> Result<Predictor> {
    Ok(Predictor {
        artifact: Artifact::load(path)?,
    })
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

impl Predictor {
    pub fn new(artifact: Artifact) -> Self {
        Self { artifact }
    }

    pub fn model_version(&self) -> &str {
        &self.artifact.meta.model_version
    }

    pub fn artifact(&self) -> &Artifact {
        &self.artifact
    }

    /// Inputs longer than the artifact's `max_seq_len` are cut at the end,
    /// exactly as during training.
    pub fn predict(&self, text: &str) -> Result<Prediction> {
        if text.trim().is_empty() {
            return Err(InferenceError::EmptyText);
        }
        let logits = self.artifact.logits(&[text])?;
        let row: Vec<f64> = logits.row(0).iter().map(|&x| x as f64).collect();
        let probs = softmax(&row);
        Ok(Prediction {
            label: Fallacy::ALL[argmax(&probs)],
            scores: Fallacy::ALL.iter().copied().zip(probs).collect(),
            model_version: self.model_version().to_string(),
            input_hash: hex::encode(Sha256::digest(text.as_bytes())),
        })
    }

    pub fn predict_batch<S: AsRef<str>>(&self, texts: &[S]) -> Result<Vec<Prediction>> {
        texts
            .iter()
            .enumerate()
            .map(|(index, t)| {
                self.predict(t.as_ref()).map_err(|e| InferenceError::Batch {
                    index,
                    source: Box::new(e),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub bind: SocketAddr,
    /// Allowed CORS origin; any origin when `None`.
    pub ui_origin: Option<String>,
    /// Predictions computed at the same time.
    pub workers: usize,
}

impl ServeOptions {
    /// `FLICC_BIND` (default `127.0.0.1:8080`) and `FLICC_UI_ORIGIN`.
    pub fn from_env() -> Result<Self, String> {
        let bind = std::env::var("FLICC_BIND").unwrap_or_else(|_| "127.0.0.1:8080".into());
        let bind = bind.parse().map_err(|e| format!("FLICC_BIND `{bind}`: {e}"))?;
        Ok(Self {
            bind,
            ui_origin: std::env::var("FLICC_UI_ORIGIN").ok().filter(|s| !s.is_empty()),
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
        })
    }
}

#[derive(Clone)]
struct AppState {
    predictor: Arc<Predictor>,
    permits: Arc<Semaphore>,
}

#[derive(Deserialize)]
struct PredictRequest {
    text: String,
}

fn error_response(status: StatusCode, code: &str, message: String) -> Response {
    (status, Json(json!({"error": code, "message": message}))).into_response()
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "model_version": state.predictor.model_version(),
        "api_version": API_VERSION,
    }))
}

async fn labels() -> Json<serde_json::Value> {
    Json(json!({"labels": taxonomy().labels}))
}

async fn predict(State(state): State<AppState>, body: Result<Json<PredictRequest>, JsonRejection>) -> Response {
    let Json(request) = match body {
        Ok(b) => b,
        Err(rejection) => return error_response(StatusCode::BAD_REQUEST, "BadRequest", rejection.body_text()),
    };
    if request.text.trim().is_empty() {
        return error_response(StatusCode::BAD_REQUEST, "EmptyText", "text is empty".into());
    }
    let Ok(_permit) = state.permits.clone().acquire_owned().await else {
        return error_response(StatusCode::SERVICE_UNAVAILABLE, "ShuttingDown", "server is stopping".into());
    };
    let predictor = state.predictor.clone();
    match tokio::task::spawn_blocking(move || predictor.predict(&request.text)).await {
        Ok(Ok(p)) => Json(p).into_response(),
        Ok(Err(InferenceError::EmptyText)) => {
            error_response(StatusCode::BAD_REQUEST, "EmptyText", "text is empty".into())
        }
        Ok(Err(e)) => error_response(StatusCode::INTERNAL_SERVER_ERROR, e.code(), e.to_string()),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, "ModelError", e.to_string()),
    }
}

pub fn router(predictor: Arc<Predictor>, options: &ServeOptions) -> Router {
    let origin = match options.ui_origin.as_deref().map(HeaderValue::from_str) {
        Some(Ok(v)) => AllowOrigin::exact(v),
        _ => AllowOrigin::any(),
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    let state = AppState {
        predictor,
        permits: Arc::new(Semaphore::new(options.workers.max(1))),
    };
    Router::new()
        .route("/health", get(health))
        .route("/labels", get(labels))
        .route("/predict", post(predict))
        .layer(cors)
        .with_state(state)
}

/// Runs the HTTP service until the process is stopped.
pub async fn serve(predictor: Arc<Predictor>, options: ServeOptions) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(options.bind)
        .await
        .map_err(|source| InferenceError::BindFailure {
            addr: options.bind,
            source,
        })?;
    axum::serve(listener, router(predictor, &options)).await.map_err(InferenceError::Server)
}

#[cfg(test)]
mod tests {
    use super::*;
    use axum::body::Body;
    use axum::http::Request;
    use flicc_nn::{BertConfig, SequenceClassifier, WordPiece};
    use http_body_util::BodyExt;
    use tower::ServiceExt;

    fn predictor() -> Predictor {
        let tok = WordPiece::build_from_corpus(&["scientists signed a petition about sea ice"], 128, true).unwrap();
        let config = BertConfig::with_dims(tok.vocab_size(), 16, 1, 2, 32);
        let model = SequenceClassifier::new(config, 12, 9).unwrap();
        Predictor::new(Artifact::new(model, tok, "scratch:test", 8, None).unwrap())
    }

    #[test]
    fn scores_form_a_distribution() {
        let p = predictor();
        let a = p.predict("scientists signed a petition").unwrap();
        assert_eq!(a.scores.len(), 12);
        assert!((a.scores.values().sum::<f64>() - 1.0).abs() < 1e-9);
        let best = a.scores.iter().fold((Fallacy::AdHominem, f64::MIN), |acc, (&f, &s)| if s > acc.1 { (f, s) } else { acc });
        assert_eq!(a.label, best.0);
        assert_eq!(a, p.predict("scientists signed a petition").unwrap());
        assert_eq!(a.input_hash.len(), 64);
        assert!(matches!(p.predict(" \n"), Err(InferenceError::EmptyText)));
    }

    #[test]
    fn long_inputs_are_truncated_not_rejected() {
        let p = predictor();
        let long = "sea ice ".repeat(500);
        assert!(p.predict(&long).is_ok());
    }

    #[test]
    fn batch_matches_loop_and_reports_index() {
        let p = predictor();
        let texts = ["sea ice", "a petition", "scientists"];
        let batch = p.predict_batch(&texts).unwrap();
        let looped: Vec<Prediction> = texts.iter().map(|t| p.predict(t).unwrap()).collect();
        assert_eq!(batch, looped);
        match p.predict_batch(&["ok", "", "ok"]) {
            Err(InferenceError::Batch { index: 1, source }) => assert_eq!(source.code(), "EmptyText"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_artifact_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_predictor(dir.path()), Err(InferenceError::ArtifactCorrupt(_))));
    }

    async fn call(app: Router, request: Request<Body>) -> (StatusCode, serde_json::Value) {
        let response = app.oneshot(request).await.unwrap();
        let status = response.status();
        let bytes = response.into_body().collect().await.unwrap().to_bytes();
        (status, serde_json::from_slice(&bytes).unwrap())
    }

    fn post(text: &str) -> Request<Body> {
        Request::post("/predict")
            .header("content-type", "application/json")
            .body(Body::from(json!({"text": text}).to_string()))
            .unwrap()
    }

    #[tokio::test]
    async fn http_endpoints() {
        let options = ServeOptions {
            bind: "127.0.0.1:0".parse().unwrap(),
            ui_origin: Some("http://localhost:5173".into()),
            workers: 2,
        };
        let p = Arc::new(predictor());
        let app = router(p.clone(), &options);

        let (status, body) = call(app.clone(), Request::get("/health").body(Body::empty()).unwrap()).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(body["status"], "ok");
        assert_eq!(body["model_version"], p.model_version());

        let (status, body) = call(app.clone(), Request::get("/labels").body(Body::empty()).unwrap()).await;
        assert_eq!(status, StatusCode::OK);
        let labels = body["labels"].as_array().unwrap();
        assert_eq!(labels.len(), 12);
        assert_eq!(labels[4]["canonical_name"], "fake experts");
        assert!(labels[4]["definition"].as_str().unwrap().starts_with("Presenting an unqualified"));

        let (status, first) = call(app.clone(), post("sea ice")).await;
        assert_eq!(status, StatusCode::OK);
        let (_, second) = call(app.clone(), post("sea ice")).await;
        assert_eq!(first, second);
        assert_eq!(serde_json::from_value::<Prediction>(first).unwrap(), p.predict("sea ice").unwrap());

        let (status, body) = call(app.clone(), post("")).await;
        assert_eq!(status, StatusCode::BAD_REQUEST);
        assert_eq!(body["error"], "EmptyText");

        let bad = Request::post("/predict")
            .header("content-type", "application/json")
            .body(Body::from("{\"txt\": 1}"))
            .unwrap();
        let (status, body) = call(app.clone(), bad).await;
        assert_eq!(status, StatusCode::BAD_REQUEST);
        assert_eq!(body["error"], "BadRequest");

        let preflight = Request::builder()
            .method("OPTIONS")
            .uri("/predict")
            .header("origin", "http://localhost:5173")
            .header("access-control-request-method", "POST")
            .body(Body::empty())
            .unwrap();
        let response = app.oneshot(preflight).await.unwrap();
        assert_eq!(
            response.headers().get("access-control-allow-origin").unwrap(),
            "http://localhost:5173"
        );
    }

    #[tokio::test]
    async fn bind_failure_is_reported() {
        let taken = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let options = ServeOptions {
            bind: taken.local_addr().unwrap(),
            ui_origin: None,
            workers: 1,
        };
        assert!(matches!(
            serve(Arc::new(predictor()), options).await,
            Err(InferenceError::BindFailure { .. })
        ));
    }
}
