//! HTTP JSON suggestion service.
//!
//! `POST /suggest` runs the pipeline for one request; `GET /health` reports
//! the loaded models. Models are loaded once and shared read-only.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use wlac_core::corpus::tokenize;
use wlac_core::inference::{Engine, SuggestionRequest, DEFAULT_K};
use wlac_core::WlacError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    pub default_k: usize,
    /// Largest accepted request body.
    pub max_body_bytes: usize,
    /// Largest accepted number of source or context tokens.
    pub max_tokens: usize,
    pub max_k: usize,
    /// Include the probe attention row in responses.
    pub trace: bool,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind: "127.0.0.1:8080".into(),
            default_k: DEFAULT_K,
            max_body_bytes: 64 * 1024,
            max_tokens: 256,
            max_k: 256,
            trace: false,
        }
    }
}

/// Tokens either as a list or as whitespace-separated text.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum Tokens {
    List(Vec<String>),
    Text(String),
}

impl Tokens {
    fn into_vec(self) -> Vec<String> {
        match self {
            Tokens::List(v) => v,
            Tokens::Text(s) => tokenize(&s),
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum Mode {
    Rerank,
    Baseline,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SuggestBody {
    source: Tokens,
    #[serde(default)]
    left_ctx: Option<Tokens>,
    #[serde(default)]
    right_ctx: Option<Tokens>,
    typed: String,
    #[serde(default)]
    k: Option<usize>,
    #[serde(default)]
    mode: Option<Mode>,
}

struct AppState {
    engine: Engine,
    config: ServiceConfig,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    reason: &'static str,
    message: String,
}

impl ApiError {
    fn bad_request(reason: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            reason,
            message: message.into(),
        }
    }

    fn too_large(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::PAYLOAD_TOO_LARGE,
            reason: "too-large",
            message: message.into(),
        }
    }
}

impl From<WlacError> for ApiError {
    fn from(e: WlacError) -> Self {
        let status = match e {
            WlacError::SequenceTooLong { .. } => StatusCode::PAYLOAD_TOO_LARGE,
            WlacError::NoCandidate { .. } | WlacError::InvalidArgument(_) | WlacError::IdOutOfRange { .. } => {
                StatusCode::BAD_REQUEST
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError {
            status,
            reason: e.kind(),
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": self.message, "reason": self.reason });
        (self.status, Json(body)).into_response()
    }
}

pub fn router(engine: Engine, config: ServiceConfig) -> Router {
    let limit = config.max_body_bytes;
    let state = Arc::new(AppState { engine, config });
    Router::new()
        .route("/suggest", post(suggest))
        .route("/health", get(health))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let engine = &state.engine;
    let mut models = vec!["baseline"];
    if engine.energy.is_some() {
        models.push("energy");
    }
    Json(json!({
        "status": "ok",
        "models": models,
        "vocab_sizes": {
            "source": engine.src_vocab.len(),
            "target": engine.tgt_vocab.len(),
        },
        "default_k": state.config.default_k,
    }))
}

fn parse_request(body: &[u8], config: &ServiceConfig) -> Result<(SuggestionRequest, Mode), ApiError> {
    let body: SuggestBody =
        serde_json::from_slice(body).map_err(|e| ApiError::bad_request("malformed-request", e.to_string()))?;
    let request = SuggestionRequest {
        source: body.source.into_vec(),
        left_ctx: body.left_ctx.map(Tokens::into_vec).unwrap_or_default(),
        right_ctx: body.right_ctx.map(Tokens::into_vec).unwrap_or_default(),
        typed: body.typed,
        k: body.k.unwrap_or(config.default_k),
    };
    if request.source.is_empty() {
        return Err(ApiError::bad_request("malformed-request", "source is empty"));
    }
    if request.typed.is_empty() {
        return Err(ApiError::bad_request("malformed-request", "typed is empty"));
    }
    if request.k == 0 {
        return Err(ApiError::bad_request("malformed-request", "k must be >= 1"));
    }
    if request.k > config.max_k {
        return Err(ApiError::too_large(format!("k exceeds {}", config.max_k)));
    }
    let target_len = request.left_ctx.len() + 1 + request.right_ctx.len();
    if request.source.len() > config.max_tokens || target_len > config.max_tokens {
        return Err(ApiError::too_large(format!("more than {} tokens", config.max_tokens)));
    }
    Ok((request, body.mode.unwrap_or(Mode::Rerank)))
}

async fn suggest(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let (request, mode) = parse_request(&body, &state.config)?;
    let worker = state.clone();
    let result = tokio::task::spawn_blocking(move || {
        worker
            .engine
            .suggest(&request, mode == Mode::Rerank, worker.config.trace)
    })
    .await
    .map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        reason: "internal",
        message: e.to_string(),
    })??;
    Ok(Json(result).into_response())
}

pub async fn serve(engine: Engine, config: ServiceConfig) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(&config.bind).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(engine, config)).await?;
    Ok(())
}
