//! Newline-delimited JSON event ingestion over a local TCP socket.
//!
//! Each line is one event object with a `kind` of `create_run`, `marker`, or
//! `close_run`; the remaining fields mirror the registry types. Every line
//! gets exactly one reply line:
//!
//! ```text
//! -> {"kind":"create_run","model_name":"mlp","num_layers":3,"nodes_per_layer":128,"epochs":10,"dataset":"mnist"}
//! <- ok 1700000000000-1a2b3c4d
//! -> {"kind":"marker","run_id":"1700000000000-1a2b3c4d","label":"epoch_start","epoch":0}
//! <- ok
//! -> {"kind":"dance"}
//! <- err unknown_kind dance
//! ```
//!
//! `create_run` replies carry the new run id after `ok`. Timestamps are taken
//! from the client when present and stamped at receipt otherwise.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde_json::{Map, Value};
use thiserror::Error;

use crate::registry::{
    opt_i64, opt_str, req_str, CloseStatus, FieldError, Hyperparameters, Marker, Registry, RegistryError, RunRecord,
};
use crate::sampler::now_unix_ms;

pub const DEFAULT_GATEWAY_PORT: u16 = 8791;

const POLL: Duration = Duration::from_millis(50);
const MAX_LINE: usize = 64 * 1024;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("bad_syntax line {0}")]
    BadSyntax(usize),
    #[error("unknown_kind {0}")]
    UnknownKind(String),
    #[error("schema_error {0}")]
    SchemaError(FieldError),
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("cannot bind {addr}: {source}")]
    BindFailure { addr: String, source: io::Error },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WireEvent {
    CreateRun {
        hyperparameters: Hyperparameters,
        ts_unix_ms: i64,
    },
    Marker(Marker),
    CloseRun {
        run_id: String,
        status: CloseStatus,
        ts_unix_ms: i64,
    },
}

/// Parses and validates one protocol line. `received_at` stamps events that
/// carry no `ts_unix_ms`.
pub fn parse_event_line(line: &str, lineno: usize, received_at: i64) -> Result<WireEvent, WireError> {
    let value: Value =
        serde_json::from_str(line.trim_end_matches(['\r', '\n'])).map_err(|_| WireError::BadSyntax(lineno))?;
    let Value::Object(map) = value else {
        return Err(WireError::BadSyntax(lineno));
    };
    let kind = req_str(&map, "kind").map_err(WireError::SchemaError)?;
    match kind.as_str() {
        "create_run" => parse_create(&map, received_at),
        "marker" => Marker::from_json_map(&map, None, received_at, &["kind"])
            .map(WireEvent::Marker)
            .map_err(WireError::SchemaError),
        "close_run" => parse_close(&map, received_at),
        _ => Err(WireError::UnknownKind(kind)),
    }
}

fn parse_create(map: &Map<String, Value>, received_at: i64) -> Result<WireEvent, WireError> {
    let hyperparameters =
        Hyperparameters::from_json_map(map, &["kind", "ts_unix_ms"]).map_err(WireError::SchemaError)?;
    let ts_unix_ms = opt_i64(map, "ts_unix_ms")
        .map_err(WireError::SchemaError)?
        .unwrap_or(received_at);
    Ok(WireEvent::CreateRun {
        hyperparameters,
        ts_unix_ms,
    })
}

fn parse_close(map: &Map<String, Value>, received_at: i64) -> Result<WireEvent, WireError> {
    const FIELDS: [&str; 4] = ["kind", "run_id", "status", "ts_unix_ms"];
    if let Some(k) = map.keys().find(|k| !FIELDS.contains(&k.as_str())) {
        return Err(WireError::SchemaError(FieldError::new(k.as_str(), "unknown field")));
    }
    let run_id = req_str(map, "run_id").map_err(WireError::SchemaError)?;
    let status = match opt_str(map, "status").map_err(WireError::SchemaError)? {
        None => CloseStatus::Closed,
        Some(s) => CloseStatus::parse(&s)
            .ok_or_else(|| WireError::SchemaError(FieldError::new("status", "expected closed or aborted")))?,
    };
    let ts_unix_ms = opt_i64(map, "ts_unix_ms")
        .map_err(WireError::SchemaError)?
        .unwrap_or(received_at);
    Ok(WireEvent::CloseRun {
        run_id,
        status,
        ts_unix_ms,
    })
}

/// Notified after run lifecycle changes are committed to the registry.
pub trait RunObserver: Send + Sync {
    fn run_created(&self, _run: &RunRecord) {}
    fn run_closed(&self, _run: &RunRecord) {}
}

/// Applies one event to the registry and returns the reply line (without
/// the trailing newline).
pub fn apply_event(
    registry: &Registry,
    observer: Option<&dyn RunObserver>,
    event: WireEvent,
) -> Result<String, RegistryError> {
    match event {
        WireEvent::CreateRun {
            hyperparameters,
            ts_unix_ms,
        } => {
            let run = registry.create_run(hyperparameters, ts_unix_ms)?;
            if let Some(o) = observer {
                o.run_created(&run);
            }
            Ok(format!("ok {}", run.run_id))
        }
        WireEvent::Marker(marker) => {
            registry.add_marker(marker)?;
            Ok("ok".into())
        }
        WireEvent::CloseRun {
            run_id,
            status,
            ts_unix_ms,
        } => {
            let run = registry.close_run(&run_id, status, ts_unix_ms)?;
            if let Some(o) = observer {
                o.run_closed(&run);
            }
            Ok("ok".into())
        }
    }
}

fn registry_reason(e: &RegistryError) -> String {
    match e {
        RegistryError::Validation(f) => format!("schema_error {f}"),
        RegistryError::UnknownRun(id) => format!("unknown_run {id}"),
        RegistryError::AlreadyClosed(id) => format!("already_closed {id}"),
        RegistryError::RunClosed(id) => format!("run_closed {id}"),
        other => format!("internal {other}"),
    }
}

/// Running gateway; stops (and joins every connection) on [`GatewayHandle::stop`]
/// or drop.
pub struct GatewayHandle {
    local_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
}

impl GatewayHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.acceptor.take() {
            let _ = t.join();
        }
    }
}

impl Drop for GatewayHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Binds `endpoint` and serves events until stopped. Each connection runs
/// on its own thread; events from one connection are applied in order.
pub fn serve_events(
    endpoint: impl ToSocketAddrs + std::fmt::Debug,
    registry: Arc<Registry>,
    observer: Option<Arc<dyn RunObserver>>,
) -> Result<GatewayHandle, GatewayError> {
    let addr_text = format!("{endpoint:?}");
    let bind_err = |source| GatewayError::BindFailure {
        addr: addr_text.clone(),
        source,
    };
    let listener = TcpListener::bind(&endpoint).map_err(bind_err)?;
    listener.set_nonblocking(true).map_err(bind_err)?;
    let local_addr = listener.local_addr().map_err(bind_err)?;
    let stop = Arc::new(AtomicBool::new(false));

    let acceptor_stop = Arc::clone(&stop);
    let acceptor = thread::Builder::new()
        .name("memscope-gateway".into())
        .spawn(move || {
            let connections: Mutex<Vec<JoinHandle<()>>> = Mutex::new(Vec::new());
            while !acceptor_stop.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, peer)) => {
                        tracing::debug!(%peer, "gateway connection");
                        let registry = Arc::clone(&registry);
                        let observer = observer.clone();
                        let stop = Arc::clone(&acceptor_stop);
                        let spawned = thread::Builder::new()
                            .name("memscope-gateway-conn".into())
                            .spawn(move || {
                                if let Err(e) = handle_connection(stream, &registry, observer.as_deref(), &stop) {
                                    tracing::debug!(%peer, "gateway connection ended: {e}");
                                }
                            });
                        match spawned {
                            Ok(h) => {
                                let mut conns = connections.lock().unwrap();
                                conns.retain(|h| !h.is_finished());
                                conns.push(h);
                            }
                            Err(e) => tracing::warn!("cannot spawn gateway connection thread: {e}"),
                        }
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL),
                    Err(e) => {
                        tracing::warn!("gateway accept failed: {e}");
                        thread::sleep(POLL);
                    }
                }
            }
            for h in connections.into_inner().unwrap() {
                let _ = h.join();
            }
        })
        .map_err(bind_err)?;

    Ok(GatewayHandle {
        local_addr,
        stop,
        acceptor: Some(acceptor),
    })
}

fn handle_connection(
    stream: TcpStream,
    registry: &Registry,
    observer: Option<&dyn RunObserver>,
    stop: &AtomicBool,
) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(POLL))?;
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let mut buf = Vec::new();
    let mut lineno = 0usize;
    loop {
        if stop.load(Ordering::SeqCst) {
            return Ok(());
        }
        match reader.read_until(b'\n', &mut buf) {
            Ok(0) => return Ok(()),
            Ok(_) if buf.last() != Some(&b'\n') => {
                // EOF in the middle of a line; the fragment is discarded.
                return Ok(());
            }
            Ok(_) => {
                lineno += 1;
                let reply = match std::str::from_utf8(&buf) {
                    Ok(line) if line.trim().is_empty() => None,
                    Ok(line) => Some(handle_line(line, lineno, registry, observer)),
                    Err(_) => Some(format!("err {}", WireError::BadSyntax(lineno))),
                };
                buf.clear();
                if let Some(mut reply) = reply {
                    reply.push('\n');
                    writer.write_all(reply.as_bytes())?;
                }
            }
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                if buf.len() > MAX_LINE {
                    buf.clear();
                    lineno += 1;
                    writer.write_all(format!("err {}\n", WireError::BadSyntax(lineno)).as_bytes())?;
                }
            }
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
}

fn handle_line(line: &str, lineno: usize, registry: &Registry, observer: Option<&dyn RunObserver>) -> String {
    match parse_event_line(line, lineno, now_unix_ms()) {
        Ok(event) => match apply_event(registry, observer, event) {
            Ok(reply) => reply,
            Err(e) => format!("err {}", registry_reason(&e)),
        },
        Err(e) => format!("err {e}"),
    }
}

/// Blocking client for the event protocol.
pub struct GatewayClient {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("gateway i/o: {0}")]
    Io(#[from] io::Error),
    #[error("gateway closed the connection")]
    Closed,
    #[error("gateway rejected event: {0}")]
    Rejected(String),
}

impl GatewayClient {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, ClientError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Self {
            writer: stream.try_clone()?,
            reader: BufReader::new(stream),
        })
    }

    /// Sends one raw line and returns the reply line without its newline.
    pub fn send_line(&mut self, line: &str) -> Result<String, ClientError> {
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        let mut reply = String::new();
        if self.reader.read_line(&mut reply)? == 0 {
            return Err(ClientError::Closed);
        }
        Ok(reply.trim_end().to_owned())
    }

    /// Sends an event object; `err` replies become [`ClientError::Rejected`].
    pub fn send(&mut self, event: &Value) -> Result<String, ClientError> {
        let reply = self.send_line(&event.to_string())?;
        match reply.strip_prefix("ok") {
            Some(rest) => Ok(rest.trim().to_owned()),
            None => Err(ClientError::Rejected(
                reply.strip_prefix("err ").unwrap_or(&reply).to_owned(),
            )),
        }
    }

    pub fn create_run(&mut self, hp: &Hyperparameters) -> Result<String, ClientError> {
        let mut event = serde_json::to_value(hp).expect("hyperparameters serialize");
        event["kind"] = Value::from("create_run");
        self.send(&event)
    }

    pub fn marker(&mut self, marker: &Marker) -> Result<(), ClientError> {
        let mut event = serde_json::to_value(marker).expect("marker serializes");
        event["kind"] = Value::from("marker");
        self.send(&event).map(drop)
    }

    pub fn close_run(&mut self, run_id: &str, status: CloseStatus) -> Result<(), ClientError> {
        let status = match status {
            CloseStatus::Closed => "closed",
            CloseStatus::Aborted => "aborted",
        };
        self.send(
            &serde_json::json!({"kind": "close_run", "run_id": run_id, "status": status, "ts_unix_ms": now_unix_ms()}),
        )
        .map(drop)
    }
}
