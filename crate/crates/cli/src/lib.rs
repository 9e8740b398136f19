//! HTTP surface of the engine. Handlers run engine calls on the blocking
//! thread pool; errors come back as `{error, stage}` JSON.

use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::json;

use qm_core::engine::{DocumentMeta, Engine, QueryOptions, StrategyChoice, TagFilter};
use qm_core::knowledge_index::RetrievalMode;
use qm_core::Error;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestBody {
    pub content: String,
    pub uri: String,
    pub effective_date: NaiveDate,
    #[serde(default)]
    pub doc_id: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryBody {
    pub question: String,
    #[serde(default)]
    pub strategy: StrategyChoice,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub as_of: Option<NaiveDate>,
    #[serde(default)]
    pub tags: Vec<TagFilter>,
    #[serde(default)]
    pub mode: RetrievalMode,
}

impl QueryBody {
    pub fn options(&self) -> QueryOptions {
        QueryOptions {
            strategy: self.strategy,
            k: self.k,
            as_of: self.as_of,
            tags: self.tags.clone(),
            mode: self.mode,
        }
    }
}

/// An engine error rendered as a JSON body with a matching status.
#[derive(Debug)]
pub struct ApiError(pub Error);

pub fn status_of(e: &Error) -> StatusCode {
    match e.root() {
        Error::InvalidArgument(_)
        | Error::Encoding { .. }
        | Error::Validation(_)
        | Error::JudgeParse { .. }
        | Error::ProvenanceMismatch { .. } => StatusCode::BAD_REQUEST,
        Error::NotFound(_) => StatusCode::NOT_FOUND,
        Error::Upstream { .. } => StatusCode::BAD_GATEWAY,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = status_of(&self.0);
        tracing::warn!(status = status.as_u16(), stage = ?self.0.stage(), error = %self.0, "request failed");
        let body = json!({
            "error": self.0.root().to_string(),
            "stage": self.0.stage(),
        });
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> qm_core::Result<T> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(Error::Data(format!("worker failed: {e}"))))?
        .map_err(ApiError)
}

async fn ingest(
    State(engine): State<Arc<Engine>>,
    Json(body): Json<IngestBody>,
) -> ApiResult<qm_core::engine::IngestReport> {
    let meta = DocumentMeta {
        uri: body.uri,
        effective_date: body.effective_date,
        doc_id: body.doc_id,
    };
    let content = body.content.into_bytes();
    blocking(move || engine.ingest(&content, &meta))
        .await
        .map(Json)
}

async fn query(
    State(engine): State<Arc<Engine>>,
    Json(body): Json<QueryBody>,
) -> ApiResult<qm_core::engine::QueryResponse> {
    blocking(move || engine.query(&body.question, &body.options()))
        .await
        .map(Json)
}

async fn unit(
    State(engine): State<Arc<Engine>>,
    Path(id): Path<String>,
) -> ApiResult<qm_core::knowledge_model::KnowledgeUnit> {
    blocking(move || engine.unit(&id)).await.map(Json)
}

async fn trace(
    State(engine): State<Arc<Engine>>,
    Path(qid): Path<String>,
) -> ApiResult<qm_core::retrieval_engine::RetrievalTrace> {
    blocking(move || engine.trace(&qid)).await.map(Json)
}

async fn table1(State(engine): State<Arc<Engine>>) -> ApiResult<qm_core::evalkit::Table1> {
    blocking(move || engine.table1()).await.map(Json)
}

async fn healthz(State(engine): State<Arc<Engine>>) -> Json<serde_json::Value> {
    Json(json!({"status": "ok", "units": engine.index().len()}))
}

pub fn router(engine: Arc<Engine>) -> Router {
    Router::new()
        .route("/ingest", post(ingest))
        .route("/query", post(query))
        .route("/units/{id}", get(unit))
        .route("/traces/{qid}", get(trace))
        .route("/eval/table1", get(table1))
        .route("/healthz", get(healthz))
        .with_state(engine)
}
