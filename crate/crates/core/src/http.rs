//! Minimal blocking JSON-over-HTTP helpers on top of ureq.

use std::time::Duration;

use ureq::Agent;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HttpError {
    Connect(String),
    Timeout,
    Status { status: u16, body: String },
    Malformed(String),
}

fn agent(timeout: Duration) -> Agent {
    Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into()
}

fn map_err(err: ureq::Error) -> HttpError {
    match err {
        ureq::Error::Timeout(_) => HttpError::Timeout,
        ureq::Error::ConnectionFailed | ureq::Error::HostNotFound => HttpError::Connect(err.to_string()),
        ureq::Error::Io(e) => match e.kind() {
            std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock => HttpError::Timeout,
            std::io::ErrorKind::ConnectionRefused
            | std::io::ErrorKind::ConnectionReset
            | std::io::ErrorKind::ConnectionAborted
            | std::io::ErrorKind::NotConnected
            | std::io::ErrorKind::AddrNotAvailable => HttpError::Connect(e.to_string()),
            _ => HttpError::Malformed(e.to_string()),
        },
        other => HttpError::Malformed(other.to_string()),
    }
}

fn finish(mut response: ureq::http::Response<ureq::Body>) -> Result<Vec<u8>, HttpError> {
    let status = response.status().as_u16();
    let body = response
        .body_mut()
        .with_config()
        .limit(256 * 1024 * 1024)
        .read_to_vec()
        .map_err(map_err)?;
    if (200..300).contains(&status) {
        Ok(body)
    } else {
        Err(HttpError::Status {
            status,
            body: String::from_utf8_lossy(&body).into_owned(),
        })
    }
}

pub fn post_json(url: &str, body: &[u8], timeout: Duration) -> Result<Vec<u8>, HttpError> {
    let response = agent(timeout)
        .post(url)
        .header("Content-Type", "application/json")
        .send(body)
        .map_err(map_err)?;
    finish(response)
}

pub fn get(url: &str, timeout: Duration) -> Result<Vec<u8>, HttpError> {
    finish(agent(timeout).get(url).call().map_err(map_err)?)
}
