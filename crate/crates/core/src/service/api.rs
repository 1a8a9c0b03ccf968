//! Line-delimited JSON protocol.
//!
//! Each request is one JSON object on one line, selected by its `"op"`
//! field; each response is one line. Success looks like
//! `{"ok":true,"result":{...}}` and failure like
//! `{"ok":false,"error":{"code":"...","message":"..."}}`, where `code` is
//! one of `registration_required`, `conflict`, `malformed`, `retry_after`
//! (with `retry_after_ms`), `config`, `internal` or `storage`.
//!
//! Cookies, digests and share nonces are hex strings. Difficulties are
//! decimal strings, since they exceed 64 bits. Times are milliseconds
//! since the Unix epoch.
//!
//! | op | fields | result |
//! |----|--------|--------|
//! | `register_user` | `user_id`, `creation_time`? | user record |
//! | `register_device` | `user_id`, `device_id`, `model_name`?, `cpu_class`? | device record |
//! | `submit_activity` | `user_id`, `device_id`, `subject_id`, `category`?, `payload` or `payload_hex` | ticket |
//! | `submit_solution` | ticket fields `user_id`, `device_id`, `subject_id`, `activity_digest`, `timeout`, `difficulty`, `cookie`, plus `shares` | verdict |
//! | `assign_cluster` | `cluster_id`, `user_ids` | cluster |
//! | `auto_cluster` | `subject_id`, `min_size`? (default 2) | list of clusters |
//! | `published` | `subject_id` | list of due activities |
//! | `expire_pending` | | `{"expired": n}` |
//! | `compact` | | `{}` |
//! | `stats` | | counters |

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ActivityRequest, Service, SolutionRequest};
use crate::error::ServiceError;
use crate::hashrate::DeviceSpecs;

fn default_min_size() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Request {
    RegisterUser {
        user_id: String,
        #[serde(default)]
        creation_time: Option<u64>,
    },
    RegisterDevice {
        user_id: String,
        device_id: String,
        #[serde(default)]
        model_name: String,
        #[serde(default)]
        cpu_class: String,
    },
    SubmitActivity {
        user_id: String,
        device_id: String,
        subject_id: String,
        #[serde(default)]
        category: Option<String>,
        #[serde(default)]
        payload: Option<String>,
        #[serde(default)]
        payload_hex: Option<String>,
    },
    SubmitSolution(SolutionRequest),
    AssignCluster {
        cluster_id: String,
        user_ids: Vec<String>,
    },
    AutoCluster {
        subject_id: String,
        #[serde(default = "default_min_size")]
        min_size: usize,
    },
    Published {
        subject_id: String,
    },
    ExpirePending,
    Compact,
    Stats,
}

fn to_value<T: Serialize>(v: T) -> Result<Value, ServiceError> {
    serde_json::to_value(v).map_err(|e| ServiceError::Persist(e.to_string()))
}

/// Run one request against the service.
pub fn dispatch(svc: &Service, req: Request) -> Result<Value, ServiceError> {
    match req {
        Request::RegisterUser { user_id, creation_time } => to_value(svc.register_user(&user_id, creation_time)?),
        Request::RegisterDevice {
            user_id,
            device_id,
            model_name,
            cpu_class,
        } => {
            let specs = DeviceSpecs {
                device_id,
                model_name,
                cpu_class,
            };
            to_value(svc.register_device(&user_id, &specs)?)
        }
        Request::SubmitActivity {
            user_id,
            device_id,
            subject_id,
            category,
            payload,
            payload_hex,
        } => {
            let payload = match (payload, payload_hex) {
                (Some(p), None) => p.into_bytes(),
                (None, Some(h)) => {
                    hex::decode(h.trim()).map_err(|e| ServiceError::Malformed(format!("payload_hex: {e}")))?
                }
                _ => {
                    return Err(ServiceError::Malformed(
                        "exactly one of payload and payload_hex is required".into(),
                    ))
                }
            };
            let req = ActivityRequest {
                user_id,
                device_id,
                subject_id,
                category,
                payload,
            };
            to_value(svc.submit_activity(&req)?)
        }
        Request::SubmitSolution(req) => to_value(svc.submit_solution(&req)?),
        Request::AssignCluster { cluster_id, user_ids } => to_value(svc.assign_cluster(&cluster_id, &user_ids)?),
        Request::AutoCluster { subject_id, min_size } => to_value(svc.auto_cluster(&subject_id, min_size)?),
        Request::Published { subject_id } => to_value(svc.published(&subject_id)),
        Request::ExpirePending => Ok(json!({ "expired": svc.expire_pending()? })),
        Request::Compact => {
            svc.compact()?;
            Ok(json!({}))
        }
        Request::Stats => to_value(svc.stats()),
    }
}

pub fn error_body(e: &ServiceError) -> Value {
    let mut err = json!({ "code": e.code(), "message": e.to_string() });
    let retry = match e {
        ServiceError::RetryAfter { retry_after_ms } => Some(*retry_after_ms),
        ServiceError::Cookie(crate::error::CookieError::ClockSkew { retry_after_ms }) => Some(*retry_after_ms),
        _ => None,
    };
    if let Some(ms) = retry {
        err["retry_after_ms"] = json!(ms);
    }
    json!({ "ok": false, "error": err })
}

/// Parse, dispatch and encode one request line.
pub fn handle_line(svc: &Service, line: &str) -> String {
    let out = match serde_json::from_str::<Request>(line) {
        Err(e) => error_body(&ServiceError::Malformed(e.to_string())),
        Ok(req) => match dispatch(svc, req) {
            Ok(v) => json!({ "ok": true, "result": v }),
            Err(e) => {
                log::debug!("request failed: {e}");
                error_body(&e)
            }
        },
    };
    out.to_string()
}

/// Answer requests from `input` until it closes. Blank lines are skipped.
pub fn serve_lines<R: BufRead, W: Write>(svc: &Service, input: R, mut output: W) -> std::io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        writeln!(output, "{}", handle_line(svc, &line))?;
        output.flush()?;
    }
    Ok(())
}

pub fn serve_stdio(svc: &Service) -> std::io::Result<()> {
    let stdin = std::io::stdin();
    serve_lines(svc, stdin.lock(), std::io::stdout().lock())
}

fn serve_conn(svc: &Service, stream: TcpStream) -> std::io::Result<()> {
    let reader = BufReader::new(stream.try_clone()?);
    serve_lines(svc, reader, BufWriter::new(stream))
}

/// Accept connections forever, one thread per connection.
pub fn serve_tcp(svc: Arc<Service>, listener: TcpListener) -> std::io::Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let peer = stream.peer_addr().ok();
        let svc = svc.clone();
        std::thread::spawn(move || {
            if let Err(e) = serve_conn(&svc, stream) {
                log::warn!("connection {peer:?}: {e}");
            }
        });
    }
    Ok(())
}
