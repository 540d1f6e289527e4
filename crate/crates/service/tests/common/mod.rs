#![allow(dead_code)]

use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use ncdkit_service::{router, AppState, ServiceConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

pub struct Client {
    pub state: Arc<AppState>,
    app: Router,
}

impl Client {
    pub fn new(config: ServiceConfig) -> Self {
        let state = AppState::new(&config);
        Self {
            app: router(state.clone()),
            state,
        }
    }

    pub async fn raw(&self, method: Method, uri: &str, body: Body) -> (StatusCode, Vec<u8>) {
        let req = Request::builder().method(method).uri(uri).body(body).unwrap();
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
        (status, bytes)
    }

    pub async fn call(&self, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        let body = body.map_or_else(Body::empty, |v| Body::from(v.to_string()));
        let (status, bytes) = self.raw(method, uri, body).await;
        let value = serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()));
        (status, value)
    }

    pub async fn get(&self, uri: &str) -> (StatusCode, Value) {
        self.call(Method::GET, uri, None).await
    }

    pub async fn post(&self, uri: &str, body: Value) -> (StatusCode, Value) {
        self.call(Method::POST, uri, Some(body)).await
    }

    pub async fn upload(&self, csv: &str) -> String {
        let (status, body) = self.raw(Method::POST, "/datasets", Body::from(csv.to_string())).await;
        assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
        let v: Value = serde_json::from_slice(&body).unwrap();
        v["dataset_id"].as_str().unwrap().to_string()
    }

    pub async fn train(&self, kind: &str, body: Value) -> String {
        let (status, v) = self.post(&format!("/models/{kind}/train"), body).await;
        assert_eq!(status, StatusCode::ACCEPTED, "{v}");
        v["job_id"].as_str().unwrap().to_string()
    }

    /// Polls until the job finishes, returning every snapshot seen.
    pub async fn wait(&self, job_id: &str, timeout: Duration) -> Vec<Value> {
        let start = Instant::now();
        let mut seen = Vec::new();
        loop {
            let (status, job) = self.get(&format!("/jobs/{job_id}")).await;
            assert_eq!(status, StatusCode::OK);
            let done = matches!(job["status"].as_str(), Some("succeeded" | "failed" | "cancelled"));
            seen.push(job);
            if done {
                return seen;
            }
            assert!(start.elapsed() < timeout, "job {job_id} did not finish: {:?}", seen.last());
            tokio::time::sleep(Duration::from_millis(2)).await;
        }
    }
}

/// The four Gaussian classes with A, B known and C, D unknown.
pub fn gaussian_selection(dataset_id: &str) -> Value {
    json!({
        "dataset_id": dataset_id,
        "selected_features": ["f0", "f1"],
        "target_column": "class",
        "class_status": {"A": "known", "B": "known", "C": "unknown", "D": "unknown"},
    })
}
