use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{on, MethodFilter, MethodRouter};
use axum::Router;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use ctower_core::api::{ClusterAction, FromTemplateRequest, API_PREFIX};
use ctower_core::domain::{parse_resource_string, ExperimentSpec};
use ctower_core::environment::{parse_environment_yaml, EnvironmentSpec};
use ctower_core::experiment::Telemetry;
use ctower_core::template::TemplateSpec;
use ctower_core::ControlPlane;

use crate::error::ApiError;

/// How requests prove who they are.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Auth {
    Bearer(String),
    Insecure,
}

#[derive(Clone)]
pub struct AppState {
    pub plane: Arc<ControlPlane>,
    pub auth: Auth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Route {
    pub method: &'static str,
    /// Relative to [`API_PREFIX`].
    pub path: &'static str,
    pub operation: &'static str,
}

const fn route(method: &'static str, path: &'static str, operation: &'static str) -> Route {
    Route { method, path, operation }
}

/// Every API operation and the one route that reaches it.
pub const ROUTES: &[Route] = &[
    route("POST", "/experiment", "create_experiment"),
    route("GET", "/experiment", "list_experiments"),
    route("GET", "/experiment/{id}", "get_experiment"),
    route("POST", "/experiment/{id}/kill", "kill_experiment"),
    route("GET", "/experiment/{id}/logs", "experiment_logs"),
    route("POST", "/experiment/{id}/telemetry", "append_telemetry"),
    route("POST", "/experiment/from-template/{name}", "create_from_template"),
    route("POST", "/template", "register_template"),
    route("GET", "/template", "list_templates"),
    route("GET", "/template/{name}", "get_template"),
    route("DELETE", "/template/{name}", "delete_template"),
    route("POST", "/environment", "register_environment"),
    route("GET", "/environment", "list_environments"),
    route("GET", "/environment/{name}", "get_environment"),
    route("DELETE", "/environment/{name}", "delete_environment"),
    route("GET", "/cluster", "cluster_snapshot"),
    route("POST", "/cluster", "cluster_admin"),
];

fn handler(op: &str) -> MethodRouter<AppState> {
    let filter = |m: &str| match m {
        "GET" => MethodFilter::GET,
        "POST" => MethodFilter::POST,
        "DELETE" => MethodFilter::DELETE,
        other => unreachable!("unrouted method {other}"),
    };
    let r = ROUTES.iter().find(|r| r.operation == op).expect("operation has a route");
    let f = filter(r.method);
    match op {
        "create_experiment" => on(f, create_experiment),
        "list_experiments" => on(f, list_experiments),
        "get_experiment" => on(f, get_experiment),
        "kill_experiment" => on(f, kill_experiment),
        "experiment_logs" => on(f, experiment_logs),
        "append_telemetry" => on(f, append_telemetry),
        "create_from_template" => on(f, create_from_template),
        "register_template" => on(f, register_template),
        "list_templates" => on(f, list_templates),
        "get_template" => on(f, get_template),
        "delete_template" => on(f, delete_template),
        "register_environment" => on(f, register_environment),
        "list_environments" => on(f, list_environments),
        "get_environment" => on(f, get_environment),
        "delete_environment" => on(f, delete_environment),
        "cluster_snapshot" => on(f, cluster_snapshot),
        "cluster_admin" => on(f, cluster_admin),
        other => unreachable!("no handler for {other}"),
    }
}

/// The API router. `ui_dir`, when set, is served as static files under `/ui/`.
pub fn app(state: AppState, ui_dir: Option<std::path::PathBuf>) -> Router {
    let mut api = Router::new();
    for r in ROUTES {
        api = api.route(r.path, handler(r.operation));
    }
    let api = api
        .method_not_allowed_fallback(|method: Method| async move {
            ApiError::new("MethodNotAllowed", format!("{method} is not allowed here"))
        })
        .route_layer(middleware::from_fn_with_state(state.clone(), authenticate))
        .with_state(state);
    let mut router = Router::new().nest(API_PREFIX, api);
    if let Some(dir) = ui_dir {
        let index = dir.join("index.html");
        router = router.nest_service("/ui", tower_http::services::ServeDir::new(dir).fallback(tower_http::services::ServeFile::new(index)));
    }
    router.fallback(|method: Method, uri: axum::http::Uri| async move {
        ApiError::not_found(format!("no route for {method} {}", uri.path()))
    })
}

async fn authenticate(State(state): State<AppState>, request: Request, next: Next) -> Response {
    if let Auth::Bearer(token) = &state.auth {
        let presented = request
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_str()) {
            return ApiError::new("Unauthenticated", "missing or invalid bearer token").into_response();
        }
    }
    next.run(request).await
}

fn json_response(status: StatusCode, body: String) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn json<T: Serialize>(status: StatusCode, value: &T) -> Response {
    json_response(status, serde_json::to_string(value).expect("response serializes"))
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::parse(format!("invalid request body: {e}")))
}

/// Runs blocking control-plane work off the async executor.
async fn blocking<T, E>(f: impl FnOnce() -> Result<T, E> + Send + 'static) -> Result<T, ApiError>
where
    T: Send + 'static,
    E: Into<ApiError> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(Into::into),
        Err(e) => Err(ApiError::internal(format!("handler failed: {e}"))),
    }
}

type ApiResult = Result<Response, ApiError>;

async fn create_experiment(State(s): State<AppState>, body: Bytes) -> ApiResult {
    let spec: ExperimentSpec = parse(&body)?;
    let rec = blocking(move || s.plane.create_experiment(spec)).await?;
    Ok(json_response(StatusCode::CREATED, rec.to_canonical_json()))
}

#[derive(Debug, Deserialize)]
struct ListQuery {
    namespace: Option<String>,
    limit: Option<usize>,
}

async fn list_experiments(State(s): State<AppState>, query: Result<Query<ListQuery>, axum::extract::rejection::QueryRejection>) -> ApiResult {
    let Query(q) = query.map_err(|e| ApiError::parse(e.body_text()))?;
    let list = s.plane.list_experiments(q.namespace.as_deref(), q.limit);
    Ok(json(StatusCode::OK, &list))
}

async fn get_experiment(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let rec = s.plane.get_experiment(&id)?;
    Ok(json_response(StatusCode::OK, rec.to_canonical_json()))
}

async fn kill_experiment(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let rec = blocking(move || s.plane.kill_experiment(&id)).await?;
    Ok(json_response(StatusCode::OK, rec.to_canonical_json()))
}

async fn experiment_logs(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let text = s.plane.experiment_logs(&id)?;
    Ok((StatusCode::OK, [(header::CONTENT_TYPE, "text/plain; charset=utf-8")], text).into_response())
}

async fn append_telemetry(State(s): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let telemetry: Telemetry = parse(&body)?;
    let ack = blocking(move || s.plane.append_telemetry(&id, telemetry)).await?;
    Ok(json(StatusCode::OK, &ack))
}

async fn create_from_template(State(s): State<AppState>, Path(name): Path<String>, body: Bytes) -> ApiResult {
    let req: FromTemplateRequest = if body.iter().all(u8::is_ascii_whitespace) { Default::default() } else { parse(&body)? };
    let params = req.string_params();
    let rec = blocking(move || s.plane.create_from_template(&name, params)).await?;
    Ok(json_response(StatusCode::CREATED, rec.to_canonical_json()))
}

async fn register_template(State(s): State<AppState>, body: Bytes) -> ApiResult {
    let template: TemplateSpec = parse(&body)?;
    let t = blocking(move || s.plane.register_template(template)).await?;
    Ok(json_response(StatusCode::CREATED, t.to_canonical_json()))
}

async fn list_templates(State(s): State<AppState>) -> ApiResult {
    Ok(json(StatusCode::OK, &s.plane.list_templates()))
}

async fn get_template(State(s): State<AppState>, Path(name): Path<String>) -> ApiResult {
    Ok(json_response(StatusCode::OK, s.plane.get_template(&name)?.to_canonical_json()))
}

async fn delete_template(State(s): State<AppState>, Path(name): Path<String>) -> ApiResult {
    blocking(move || s.plane.delete_template(&name)).await?;
    Ok(StatusCode::NO_CONTENT.into_response())
}

fn is_yaml(headers: &HeaderMap) -> bool {
    headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .map(|v| v.split(';').next().unwrap_or("").trim().to_ascii_lowercase())
        .is_some_and(|v| matches!(v.as_str(), "application/yaml" | "application/x-yaml" | "text/yaml" | "text/x-yaml"))
}

async fn register_environment(State(s): State<AppState>, headers: HeaderMap, body: Bytes) -> ApiResult {
    let env: EnvironmentSpec = if is_yaml(&headers) {
        let text = std::str::from_utf8(&body).map_err(|_| ApiError::parse("YAML body is not UTF-8"))?;
        parse_environment_yaml(text)?
    } else {
        parse(&body)?
    };
    let env = blocking(move || s.plane.register_environment(env)).await?;
    Ok(json(StatusCode::CREATED, &env))
}

async fn list_environments(State(s): State<AppState>) -> ApiResult {
    Ok(json(StatusCode::OK, &s.plane.list_environments()))
}

async fn get_environment(State(s): State<AppState>, Path(name): Path<String>) -> ApiResult {
    Ok(json(StatusCode::OK, &s.plane.get_environment(&name)?))
}

async fn delete_environment(State(s): State<AppState>, Path(name): Path<String>) -> ApiResult {
    blocking(move || s.plane.delete_environment(&name)).await?;
    Ok(StatusCode::NO_CONTENT.into_response())
}

fn no_cluster() -> ApiError {
    ApiError::not_found("the configured backend has no simulated cluster")
}

async fn cluster_snapshot(State(s): State<AppState>) -> ApiResult {
    let snap = s.plane.cluster_snapshot().ok_or_else(no_cluster)?;
    Ok(json(StatusCode::OK, &snap))
}

async fn cluster_admin(State(s): State<AppState>, body: Bytes) -> ApiResult {
    let action: ClusterAction = parse(&body)?;
    let cluster = s.plane.cluster().cloned().ok_or_else(no_cluster)?;
    let snap = blocking(move || match action {
        ClusterAction::AddNode { id, resources } => {
            let req = parse_resource_string(&resources).map_err(|e| {
                ApiError::new("ValidationFailed", format!("invalid resources: {e}")).with_details(e.code())
            })?;
            cluster.add_node(id, req.resources).map_err(ApiError::from)
        }
        ClusterAction::RemoveNode { id } => cluster.remove_node(&id).map_err(ApiError::from),
        ClusterAction::Tick { dt_ms } => {
            cluster.tick(dt_ms);
            Ok(cluster.snapshot())
        }
    })
    .await?;
    Ok(json(StatusCode::OK, &snap))
}
