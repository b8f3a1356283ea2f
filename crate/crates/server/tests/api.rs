use std::collections::BTreeSet;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use ctower_core::store::StoreOptions;
use ctower_core::{BackendConfig, ControlPlane, PlaneConfig};
use ctower_server::{app, AppState, Auth, ROUTES};

const TOKEN: &str = "t0ken";

const MNIST: &str = r#"{"meta":{"name":"mnist","framework":"TensorFlow","cmd":"python mnist.py"},
  "environment":{"image":"submarine:tf-mnist"},
  "spec":{"Ps":{"replicas":1,"resources":"cpu=2,memory=2048M"},"Worker":{"replicas":4,"resources":"cpu=4,gpu=4,memory=4096M"}}}"#;

struct Server {
    _dir: tempfile::TempDir,
    plane: std::sync::Arc<ControlPlane>,
    router: Router,
}

fn server_with(auth: Auth, ui: bool) -> Server {
    let dir = tempfile::tempdir().unwrap();
    let plane = ControlPlane::open(PlaneConfig {
        store_path: dir.path().join("s.wal"),
        store: StoreOptions { sync_writes: false },
        backend: BackendConfig::simulated_default(),
    })
    .unwrap();
    let ui_dir = ui.then(|| {
        let ui = dir.path().join("ui");
        std::fs::create_dir(&ui).unwrap();
        std::fs::write(ui.join("index.html"), "<html>workbench</html>").unwrap();
        ui
    });
    let router = app(AppState { plane: plane.clone(), auth }, ui_dir);
    Server { _dir: dir, plane, router }
}

fn server() -> Server {
    server_with(Auth::Bearer(TOKEN.into()), false)
}

struct Reply {
    status: StatusCode,
    content_type: String,
    body: String,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_str(&self.body).unwrap_or_else(|e| panic!("{e}: {}", self.body))
    }
}

async fn send(router: &Router, method: &str, path: &str, body: Option<(&str, &str)>, token: Option<&str>) -> Reply {
    let mut req = Request::builder().method(method).uri(path);
    if let Some(t) = token {
        req = req.header(header::AUTHORIZATION, format!("Bearer {t}"));
    }
    let req = match body {
        Some((ct, b)) => req.header(header::CONTENT_TYPE, ct).body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = router.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let content_type =
        resp.headers().get(header::CONTENT_TYPE).map(|v| v.to_str().unwrap().to_string()).unwrap_or_default();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    Reply { status, content_type, body: String::from_utf8(bytes.to_vec()).unwrap() }
}

async fn call(s: &Server, method: &str, path: &str, body: Option<&str>) -> Reply {
    send(&s.router, method, path, body.map(|b| ("application/json", b)), Some(TOKEN)).await
}

#[tokio::test]
async fn experiment_lifecycle_over_http() {
    let s = server();
    let r = call(&s, "POST", "/api/v1/experiment", Some(MNIST)).await;
    assert_eq!(r.status, StatusCode::CREATED, "{}", r.body);
    let rec = r.json();
    assert_eq!(rec["status"], "Accepted");
    assert_eq!(rec["spec"]["meta"]["name"], "mnist");
    let id = rec["id"].as_str().unwrap().to_string();

    let got = call(&s, "GET", &format!("/api/v1/experiment/{id}"), None).await;
    assert_eq!(got.status, StatusCode::OK);
    assert_eq!(got.content_type, "application/json");
    assert_eq!(got.json()["status"], "Running");
    assert_eq!(got.body, s.plane.get_experiment(&id).unwrap().to_canonical_json());

    let list = call(&s, "GET", "/api/v1/experiment?namespace=default&limit=5", None).await.json();
    assert_eq!(list[0]["id"], id.as_str());

    let t = call(&s, "POST", &format!("/api/v1/experiment/{id}/telemetry"), Some(r#"{"type":"metric","key":"auc","value":0.74,"step":1}"#)).await;
    assert_eq!((t.status, t.json()), (StatusCode::OK, json!({"late": false})));
    let t = call(&s, "POST", &format!("/api/v1/experiment/{id}/telemetry"), Some(r#"{"type":"log","task":"Worker-0","line":"hi"}"#)).await;
    assert_eq!(t.status, StatusCode::OK);
    let logs = call(&s, "GET", &format!("/api/v1/experiment/{id}/logs"), None).await;
    assert!(logs.content_type.starts_with("text/plain"));
    assert_eq!(logs.body, "==> Worker-0 <==\nhi\n");

    let k = call(&s, "POST", &format!("/api/v1/experiment/{id}/kill"), None).await;
    assert_eq!((k.status, k.json()["status"].clone()), (StatusCode::OK, json!("Killed")));
    let again = call(&s, "POST", &format!("/api/v1/experiment/{id}/kill"), None).await;
    assert_eq!((again.status, again.json()["code"].clone()), (StatusCode::CONFLICT, json!("AlreadyTerminal")));
}

#[tokio::test]
async fn error_table() {
    let s = server();
    let cases: Vec<(&str, String, Option<&str>, StatusCode, &str)> = vec![
        ("GET", "/api/v1/experiment/exp-000000000000".into(), None, StatusCode::NOT_FOUND, "NotFound"),
        ("POST", "/api/v1/experiment".into(), Some("{not json"), StatusCode::BAD_REQUEST, "ParseError"),
        (
            "POST",
            "/api/v1/experiment".into(),
            Some(r#"{"meta":{"name":""},"environment":{"image":"i"},"spec":{}}"#),
            StatusCode::BAD_REQUEST,
            "ValidationFailed",
        ),
        (
            "POST",
            "/api/v1/experiment".into(),
            Some(r#"{"meta":{"name":"x"},"environment":{"name":"nope"},"spec":{"W":{"replicas":1,"resources":"cpu=1"}}}"#),
            StatusCode::NOT_FOUND,
            "EnvironmentNotFound",
        ),
        ("POST", "/api/v1/experiment/from-template/none".into(), None, StatusCode::NOT_FOUND, "NotFound"),
        ("GET", "/api/v1/template/none".into(), None, StatusCode::NOT_FOUND, "NotFound"),
        ("DELETE", "/api/v1/environment/none".into(), None, StatusCode::NOT_FOUND, "NotFound"),
        ("POST", "/api/v1/cluster".into(), Some(r#"{"action":"remove_node","id":"ghost"}"#), StatusCode::NOT_FOUND, "NotFound"),
        (
            "POST",
            "/api/v1/cluster".into(),
            Some(r#"{"action":"add_node","id":"node-0","resources":"cpu=1"}"#),
            StatusCode::CONFLICT,
            "DuplicateNodeId",
        ),
        ("GET", "/api/v1/nowhere".into(), None, StatusCode::NOT_FOUND, "NotFound"),
        ("PUT", "/api/v1/experiment".into(), None, StatusCode::METHOD_NOT_ALLOWED, "MethodNotAllowed"),
    ];
    for (method, path, body, status, code) in cases {
        let r = call(&s, method, &path, body).await;
        assert_eq!(r.status, status, "{method} {path}: {}", r.body);
        assert_eq!(r.json()["code"], code, "{method} {path}");
    }
    let r = call(&s, "POST", "/api/v1/experiment", Some(r#"{"meta":{"name":"Bad"},"environment":{"image":"i"},"spec":{"W":{"replicas":0,"resources":"cpu=1"}}}"#)).await;
    let paths: Vec<_> = r.json()["details"].as_array().unwrap().iter().map(|v| v["path"].clone()).collect();
    assert_eq!(paths, [json!("meta.name"), json!("tasks.W.replicas")]);
}

#[tokio::test]
async fn secure_mode_rejects_before_service_code() {
    let s = server();
    for r in ROUTES {
        let path = format!("/api/v1{}", r.path.replace("{id}", "x").replace("{name}", "x"));
        for token in [None, Some("wrong")] {
            let reply = send(&s.router, r.method, &path, Some(("application/json", MNIST)), token).await;
            assert_eq!(reply.status, StatusCode::UNAUTHORIZED, "{} {path}", r.method);
            assert_eq!(reply.json()["code"], "Unauthenticated");
        }
    }
    assert!(s.plane.list_experiments(None, None).is_empty());

    let open = server_with(Auth::Insecure, false);
    let r = send(&open.router, "POST", "/api/v1/experiment", Some(("application/json", MNIST)), None).await;
    assert_eq!(r.status, StatusCode::CREATED);
}

#[tokio::test]
async fn templates_and_environments() {
    let s = server();
    let template = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/fixtures/tf-mnist-template.json")).unwrap();
    let strict = ctower_core::template::parse_template_file(&template).unwrap().to_canonical_json();
    let r = call(&s, "POST", "/api/v1/template", Some(&strict)).await;
    assert_eq!(r.status, StatusCode::CREATED, "{}", r.body);
    assert_eq!(call(&s, "POST", "/api/v1/template", Some(&strict)).await.json()["code"], "Conflict");
    assert_eq!(call(&s, "GET", "/api/v1/template/tf-mnist-template", None).await.body, strict);
    let list = call(&s, "GET", "/api/v1/template", None).await.json();
    assert_eq!(list, json!([{"name":"tf-mnist-template","author":"Submarine","description":"A template for tf-mnist"}]));

    let path = "/api/v1/experiment/from-template/tf-mnist-template";
    let missing = call(&s, "POST", path, Some(r#"{"params":{"learning_rate":"0.001"}}"#)).await;
    assert_eq!((missing.status, missing.json()["code"].clone()), (StatusCode::BAD_REQUEST, json!("MissingRequiredParameter")));
    let unknown = call(&s, "POST", path, Some(r#"{"params":{"lr":"1"}}"#)).await;
    assert_eq!(unknown.json()["code"], "UnknownParameter");
    let ok = call(&s, "POST", path, Some(r#"{"params":{"learning_rate":"0.001","batch_size":256}}"#)).await;
    assert_eq!(ok.status, StatusCode::CREATED, "{}", ok.body);
    assert_eq!(
        ok.json()["spec"]["meta"]["cmd"],
        "python mnist.py --log_dir=/train/log --learning_rate=0.001 --batch_size=256"
    );
    assert_eq!(call(&s, "DELETE", "/api/v1/template/tf-mnist-template", None).await.status, StatusCode::NO_CONTENT);

    let yaml = "name: tf2\nimage: tensorflow/tensorflow:2.1\ndependencies:\n  - numpy\n";
    let r = send(&s.router, "POST", "/api/v1/environment", Some(("application/yaml", yaml)), Some(TOKEN)).await;
    assert_eq!(r.status, StatusCode::CREATED, "{}", r.body);
    assert_eq!(r.json()["dependencies"], json!(["numpy"]));
    let bad = send(&s.router, "POST", "/api/v1/environment", Some(("text/yaml", "name: x\n")), Some(TOKEN)).await;
    assert_eq!((bad.status, bad.json()["code"].clone()), (StatusCode::BAD_REQUEST, json!("MissingField")));
    let r = call(&s, "POST", "/api/v1/environment", Some(r#"{"name":"cpu","image":"python:3"}"#)).await;
    assert_eq!(r.status, StatusCode::CREATED);
    assert_eq!(call(&s, "GET", "/api/v1/environment", None).await.json().as_array().unwrap().len(), 2);

    let exp = r#"{"meta":{"name":"e"},"environment":{"name":"tf2"},"spec":{"W":{"replicas":1,"resources":"cpu=1"}}}"#;
    let rec = call(&s, "POST", "/api/v1/experiment", Some(exp)).await.json();
    assert_eq!(rec["resolved_image"], "tensorflow/tensorflow:2.1");
    let busy = call(&s, "DELETE", "/api/v1/environment/tf2", None).await;
    assert_eq!((busy.status, busy.json()["code"].clone()), (StatusCode::CONFLICT, json!("InUse")));
    call(&s, "POST", &format!("/api/v1/experiment/{}/kill", rec["id"].as_str().unwrap()), None).await;
    assert_eq!(call(&s, "DELETE", "/api/v1/environment/tf2", None).await.status, StatusCode::NO_CONTENT);
}

#[tokio::test]
async fn cluster_admin_and_ticks() {
    let s = server();
    let snap = call(&s, "GET", "/api/v1/cluster", None).await.json();
    assert_eq!(snap["nodes"].as_array().unwrap().len(), 4);
    let spec = MNIST.replace(r#""cmd":"python mnist.py"}"#, r#""cmd":"python mnist.py"},"conf":{"sim.duration_ms":"50"}"#);
    let id = call(&s, "POST", "/api/v1/experiment", Some(&spec)).await.json()["id"].as_str().unwrap().to_string();
    let r = call(&s, "POST", "/api/v1/cluster", Some(r#"{"action":"tick","dt_ms":50}"#)).await;
    assert_eq!(r.json()["clock"], 50);
    assert_eq!(call(&s, "GET", &format!("/api/v1/experiment/{id}"), None).await.json()["status"], "Succeeded");
    let r = call(&s, "POST", "/api/v1/cluster", Some(r#"{"action":"add_node","id":"node-9","resources":"cpu=8,gpu=8,memory=64G"}"#)).await;
    assert_eq!(r.json()["nodes"].as_array().unwrap().len(), 5);
    let r = call(&s, "POST", "/api/v1/cluster", Some(r#"{"action":"add_node","id":"n","resources":"cpu=x"}"#)).await;
    assert_eq!(r.json()["code"], "ValidationFailed");
    let r = call(&s, "POST", "/api/v1/cluster", Some(r#"{"action":"remove_node","id":"node-9"}"#)).await;
    assert_eq!(r.json()["nodes"].as_array().unwrap().len(), 4);
}

#[tokio::test]
async fn workbench_bundle_is_served_without_a_token() {
    let s = server_with(Auth::Bearer(TOKEN.into()), true);
    let r = send(&s.router, "GET", "/ui/index.html", None, None).await;
    assert_eq!((r.status, r.body.as_str()), (StatusCode::OK, "<html>workbench</html>"));
    let r = send(&s.router, "GET", "/ui/experiments/42", None, None).await;
    assert_eq!(r.body, "<html>workbench</html>");
    let none = server();
    assert_eq!(send(&none.router, "GET", "/ui/index.html", None, None).await.status, StatusCode::NOT_FOUND);
}

#[test]
fn route_table_is_a_bijection() {
    let ops: BTreeSet<_> = ROUTES.iter().map(|r| r.operation).collect();
    let pairs: BTreeSet<_> = ROUTES.iter().map(|r| (r.method, r.path)).collect();
    assert_eq!(ops.len(), ROUTES.len());
    assert_eq!(pairs.len(), ROUTES.len());
}
