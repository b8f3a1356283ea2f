use std::time::Duration;

use reqwest::blocking::{Client as Http, RequestBuilder};
use reqwest::header::{AUTHORIZATION, CONTENT_TYPE};

use ctower_core::api::{ErrorBody, API_PREFIX};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    /// The server answered with an error payload.
    #[error("{code} ({status}): {message}")]
    Api { status: u16, code: String, message: String, details: Option<serde_json::Value> },
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("unexpected response: {0}")]
    Decode(#[from] serde_json::Error),
}

/// Blocking client for one server.
pub struct Client {
    http: Http,
    base: String,
    token: Option<String>,
}

impl Client {
    /// `token` of `None` sends no Authorization header.
    pub fn new(server: &str, token: Option<String>) -> Result<Client, ClientError> {
        let http = Http::builder().timeout(Duration::from_secs(60)).build()?;
        Ok(Client { http, base: format!("{}{API_PREFIX}", server.trim_end_matches('/')), token })
    }

    fn send(&self, req: RequestBuilder) -> Result<String, ClientError> {
        let req = match &self.token {
            Some(t) => req.header(AUTHORIZATION, format!("Bearer {t}")),
            None => req,
        };
        let resp = req.send()?;
        let status = resp.status();
        let text = resp.text()?;
        if status.is_success() {
            return Ok(text);
        }
        Err(match serde_json::from_str::<ErrorBody>(&text) {
            Ok(e) => ClientError::Api { status: status.as_u16(), code: e.code, message: e.message, details: e.details },
            Err(_) => ClientError::Api {
                status: status.as_u16(),
                code: status.canonical_reason().unwrap_or("Error").replace(' ', ""),
                message: text,
                details: None,
            },
        })
    }

    pub fn get(&self, path: &str) -> Result<String, ClientError> {
        self.send(self.http.get(format!("{}{path}", self.base)))
    }

    pub fn get_query(&self, path: &str, query: &[(&str, String)]) -> Result<String, ClientError> {
        self.send(self.http.get(format!("{}{path}", self.base)).query(query))
    }

    pub fn post(&self, path: &str, content_type: &str, body: String) -> Result<String, ClientError> {
        self.send(self.http.post(format!("{}{path}", self.base)).header(CONTENT_TYPE, content_type).body(body))
    }

    pub fn post_json(&self, path: &str, body: &str) -> Result<String, ClientError> {
        self.post(path, "application/json", body.to_string())
    }

    pub fn delete(&self, path: &str) -> Result<String, ClientError> {
        self.send(self.http.delete(format!("{}{path}", self.base)))
    }
}
