//! HTTP routes.

use std::collections::BTreeMap;
use std::sync::Arc;

use adaicl_core::inference::EvalReport;
use adaicl_core::pool::AnnotatedSet;
use adaicl_core::strategies::TraceEntry;
use adaicl_harness::ExperimentConfig;
use axum::body::Bytes;
use axum::extract::{Path, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::session::{PendingExample, Phase, SessionData, SessionError, SessionStore};

#[derive(Debug, Clone, Default)]
pub struct ServiceConfig {
    /// Origins allowed by CORS; empty allows any origin.
    pub allowed_origins: Vec<String>,
    /// When set, every request must carry `Authorization: Bearer <token>`.
    pub bearer_token: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetProgress {
    pub total: usize,
    pub spent: usize,
    pub remaining: usize,
    /// Cumulative budget of the current schedule step.
    pub step_budget: usize,
}

/// What the annotation UI renders for the current round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchView {
    pub session_id: String,
    pub strategy: String,
    pub phase: Phase,
    pub done: bool,
    pub iteration: usize,
    pub labels: Vec<String>,
    pub budget: BudgetProgress,
    pub examples: Vec<PendingExample>,
    /// Pending ids whose labels were already submitted.
    pub held: Vec<String>,
}

impl BatchView {
    pub fn of(data: &SessionData) -> Self {
        let total = data.total_budget();
        let spent = data.spent();
        Self {
            session_id: data.id.clone(),
            strategy: data.config.strategies.first().map(|s| s.label()).unwrap_or_default(),
            phase: data.phase,
            done: data.phase == Phase::Done,
            iteration: data.state.iteration,
            labels: data.labels.clone(),
            budget: BudgetProgress {
                total,
                spent,
                remaining: total.saturating_sub(spent),
                step_budget: data.config.budget_schedule.get(data.step).copied().unwrap_or(total),
            },
            examples: data.pending.clone(),
            held: data.held.keys().cloned().collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LabelsResponse {
    pub phase: Phase,
    pub accepted: Vec<String>,
    /// Pending ids still without a label.
    pub outstanding: Vec<String>,
    pub advanced: bool,
    /// The next batch, present when the submission completed a round.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<BatchView>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportResponse {
    pub session_id: String,
    pub phase: Phase,
    pub report: EvalReport,
    pub trace: Vec<TraceEntry>,
    pub annotated: AnnotatedSet,
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

pub struct ApiError(StatusCode, String);

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match &e {
            SessionError::BadConfig(_) => StatusCode::BAD_REQUEST,
            SessionError::NotFound(_) => StatusCode::NOT_FOUND,
            SessionError::Conflict(_) => StatusCode::CONFLICT,
            SessionError::InvalidLabel(_) => StatusCode::UNPROCESSABLE_ENTITY,
            SessionError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.0.is_server_error() {
            log::error!("{}", self.1);
        }
        (self.0, Json(ErrorBody { error: self.1 })).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn bad_request(message: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, message.into())
}

/// Runs selection work off the async executor.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, SessionError> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

async fn create_session(State(store): State<Arc<SessionStore>>, body: Bytes) -> ApiResult<Response> {
    let config: ExperimentConfig =
        serde_json::from_slice(&body).map_err(|e| bad_request(format!("invalid config: {e}")))?;
    let view = blocking(move || {
        let session = store.create(config)?;
        Ok(BatchView::of(&session.latest()))
    })
    .await?;
    Ok((StatusCode::CREATED, Json(view)).into_response())
}

async fn get_batch(State(store): State<Arc<SessionStore>>, Path(id): Path<String>) -> ApiResult<Json<BatchView>> {
    Ok(Json(BatchView::of(&store.get(&id)?.latest())))
}

async fn post_labels(
    State(store): State<Arc<SessionStore>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<LabelsResponse>> {
    let session = store.get(&id)?;
    let labels: BTreeMap<String, String> = serde_json::from_slice(&body)
        .map_err(|e| bad_request(format!("expected a JSON object of id -> label: {e}")))?;
    let response = blocking(move || {
        let outcome = session.submit(labels)?;
        let data = &outcome.data;
        let batch = outcome.advanced.then(|| BatchView::of(data));
        Ok(LabelsResponse {
            phase: data.phase,
            accepted: outcome.accepted,
            outstanding: data
                .pending
                .iter()
                .filter(|p| !data.held.contains_key(&p.id))
                .map(|p| p.id.clone())
                .collect(),
            advanced: outcome.advanced,
            batch,
        })
    })
    .await?;
    Ok(Json(response))
}

async fn get_report(State(store): State<Arc<SessionStore>>, Path(id): Path<String>) -> ApiResult<Json<ReportResponse>> {
    let session = store.get(&id)?;
    let response = blocking(move || {
        let (data, report) = session.report()?;
        Ok(ReportResponse {
            session_id: data.id.clone(),
            phase: data.phase,
            report,
            trace: data.state.trace.clone(),
            annotated: data.state.annotated.clone(),
        })
    })
    .await?;
    Ok(Json(response))
}

async fn health() -> &'static str {
    "ok"
}

async fn require_token(State(expected): State<Arc<String>>, request: Request, next: Next) -> Response {
    // preflight requests carry no credentials
    if request.method() == Method::OPTIONS {
        return next.run(request).await;
    }
    let presented = request
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if presented == Some(expected.as_str()) {
        next.run(request).await
    } else {
        ApiError(StatusCode::UNAUTHORIZED, "missing or wrong bearer token".into()).into_response()
    }
}

fn cors(config: &ServiceConfig) -> CorsLayer {
    let origins: Vec<HeaderValue> = config
        .allowed_origins
        .iter()
        .filter_map(|o| HeaderValue::from_str(o).ok())
        .collect();
    let allow = if origins.is_empty() {
        AllowOrigin::any()
    } else {
        AllowOrigin::list(origins)
    };
    CorsLayer::new()
        .allow_origin(allow)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE, header::AUTHORIZATION])
}

pub fn router(store: Arc<SessionStore>, config: &ServiceConfig) -> Router {
    let mut api = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/batch", get(get_batch))
        .route("/sessions/{id}/labels", post(post_labels))
        .route("/sessions/{id}/report", get(get_report))
        .with_state(store);
    if let Some(token) = &config.bearer_token {
        api = api.layer(middleware::from_fn_with_state(Arc::new(token.clone()), require_token));
    }
    api.route("/health", get(health)).layer(cors(config))
}
