//! NDJSON-over-TCP transport. One engine sits behind a mutex; each connection
//! is a thread reading one JSON request per line and writing one JSON event
//! per line back.
//!
//! The wire deliberately exposes only what a real network client could see:
//! token timings and text. Cache-internal ground truth (hit counts, serving
//! path) never crosses the socket, so attack code written against
//! [`EngineClient`] cannot cheat even in-process.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use crate::engine::{ChatMessage, ChatRequest, Engine, StreamEvent};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlushScope {
    Kv,
    Semantic,
    #[default]
    All,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum WireRequest {
    Chat {
        messages: Vec<ChatMessage>,
        #[serde(default)]
        max_tokens: Option<usize>,
        #[serde(default)]
        temperature: f64,
        #[serde(default)]
        stream: bool,
    },
    Flush {
        #[serde(default)]
        scope: FlushScope,
    },
    Stats,
    Shutdown,
}

impl WireRequest {
    pub fn chat(req: &ChatRequest) -> Self {
        WireRequest::Chat {
            messages: req.messages.clone(),
            max_tokens: req.max_tokens,
            temperature: req.temperature,
            stream: req.stream,
        }
    }
}

/// Server → client lines. Token/eos reuse the engine's stream event shape.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum WireEvent {
    Token { t_ms: f64, text: String },
    Eos { t_ms: f64 },
    Completion { ttft_ms: f64, eos_ms: f64, text: String },
    Ok,
    Stats { kv_resident_tokens: usize, kv_nodes: usize, semantic_entries: usize, requests: u64 },
    Error { message: String },
}

/// What a network observer learns from one request.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub ttft_ms: f64,
    pub eos_ms: f64,
    pub text: String,
}

/// Transport-agnostic client surface the attack harnesses are written
/// against.
pub trait EngineClient {
    fn chat(&mut self, req: &ChatRequest) -> Result<Observation>;
    fn flush(&mut self, scope: FlushScope) -> Result<()>;
    /// Chat requests sent so far (the attacker's query budget meter).
    fn queries_sent(&self) -> u64;
}

fn observation_from_events(events: &[StreamEvent], text: String) -> Result<Observation> {
    let first = events.first().ok_or_else(|| Error::Transport("empty event stream".into()))?;
    let last = events.last().expect("nonempty");
    let eos_ms = match last {
        StreamEvent::Eos { t_ms } => *t_ms,
        _ => return Err(Error::Transport("stream did not end with eos".into())),
    };
    Ok(Observation { ttft_ms: first.t_ms(), eos_ms, text })
}

/// Client bound directly to an engine behind a mutex (no sockets). The victim
/// side of a scenario holds a clone of the same engine handle.
pub struct InProcessClient {
    engine: Arc<Mutex<Engine>>,
    queries: u64,
}

impl InProcessClient {
    pub fn new(engine: Engine) -> Self {
        InProcessClient { engine: Arc::new(Mutex::new(engine)), queries: 0 }
    }

    pub fn from_shared(engine: Arc<Mutex<Engine>>) -> Self {
        InProcessClient { engine, queries: 0 }
    }

    pub fn shared(&self) -> Arc<Mutex<Engine>> {
        Arc::clone(&self.engine)
    }
}

impl EngineClient for InProcessClient {
    fn chat(&mut self, req: &ChatRequest) -> Result<Observation> {
        self.queries += 1;
        let completion = self.engine.lock().expect("engine lock").handle(req)?;
        observation_from_events(&completion.events, completion.text)
    }

    fn flush(&mut self, scope: FlushScope) -> Result<()> {
        let mut e = self.engine.lock().expect("engine lock");
        match scope {
            FlushScope::Kv => e.flush_kv(),
            FlushScope::Semantic => e.flush_semantic(),
            FlushScope::All => e.flush_all(),
        }
        Ok(())
    }

    fn queries_sent(&self) -> u64 {
        self.queries
    }
}

pub struct WireServer {
    addr: SocketAddr,
    engine: Arc<Mutex<Engine>>,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
}

impl WireServer {
    /// Binds 127.0.0.1 on an ephemeral port (or the given one) and serves
    /// until [`WireServer::shutdown`] or a client sends `{"mode":"shutdown"}`.
    pub fn spawn(engine: Engine, port: u16) -> Result<WireServer> {
        let listener = TcpListener::bind(("127.0.0.1", port))?;
        let addr = listener.local_addr()?;
        let engine = Arc::new(Mutex::new(engine));
        let stop = Arc::new(AtomicBool::new(false));
        let acceptor = {
            let engine = Arc::clone(&engine);
            let stop = Arc::clone(&stop);
            std::thread::spawn(move || {
                for conn in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = conn else { break };
                    let engine = Arc::clone(&engine);
                    let stop = Arc::clone(&stop);
                    std::thread::spawn(move || serve_connection(stream, engine, stop));
                }
            })
        };
        Ok(WireServer { addr, engine, stop, acceptor: Some(acceptor) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn engine(&self) -> Arc<Mutex<Engine>> {
        Arc::clone(&self.engine)
    }

    pub fn shutdown(mut self) -> Result<()> {
        self.stop.store(true, Ordering::SeqCst);
        // Unblock accept() with a throwaway connection.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.acceptor.take() {
            h.join().map_err(|_| Error::Transport("acceptor panicked".into()))?;
        }
        Ok(())
    }
}

impl Drop for WireServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

fn write_line(out: &mut impl Write, event: &WireEvent) -> std::io::Result<()> {
    let mut line = serde_json::to_string(event).expect("events serialize");
    line.push('\n');
    out.write_all(line.as_bytes())?;
    out.flush()
}

fn serve_connection(stream: TcpStream, engine: Arc<Mutex<Engine>>, stop: Arc<AtomicBool>) {
    let mut writer = match stream.try_clone() {
        Ok(w) => w,
        Err(_) => return,
    };
    let reader = BufReader::new(stream);
    for line in reader.lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        let req: WireRequest = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                let _ = write_line(&mut writer, &WireEvent::Error { message: e.to_string() });
                continue;
            }
        };
        match req {
            WireRequest::Chat { messages, max_tokens, temperature, stream } => {
                let chat = ChatRequest { messages, max_tokens, temperature, stream };
                let result = engine.lock().expect("engine lock").handle(&chat);
                match result {
                    Ok(c) => {
                        if chat.stream {
                            for ev in &c.events {
                                let wire = match ev {
                                    StreamEvent::Token { t_ms, text } => WireEvent::Token {
                                        t_ms: *t_ms,
                                        text: text.clone(),
                                    },
                                    StreamEvent::Eos { t_ms } => WireEvent::Eos { t_ms: *t_ms },
                                };
                                if write_line(&mut writer, &wire).is_err() {
                                    return;
                                }
                            }
                        } else {
                            let eos_ms = c.events.last().map(StreamEvent::t_ms).unwrap_or(c.ttft_ms);
                            let done = WireEvent::Completion {
                                ttft_ms: c.ttft_ms,
                                eos_ms,
                                text: c.text,
                            };
                            if write_line(&mut writer, &done).is_err() {
                                return;
                            }
                        }
                    }
                    Err(e) => {
                        let ev = WireEvent::Error { message: e.to_string() };
                        if write_line(&mut writer, &ev).is_err() {
                            return;
                        }
                    }
                }
            }
            WireRequest::Flush { scope } => {
                {
                    let mut e = engine.lock().expect("engine lock");
                    match scope {
                        FlushScope::Kv => e.flush_kv(),
                        FlushScope::Semantic => e.flush_semantic(),
                        FlushScope::All => e.flush_all(),
                    }
                }
                if write_line(&mut writer, &WireEvent::Ok).is_err() {
                    return;
                }
            }
            WireRequest::Stats => {
                let ev = {
                    let e = engine.lock().expect("engine lock");
                    let kv = e.kv_stats();
                    WireEvent::Stats {
                        kv_resident_tokens: kv.resident_tokens,
                        kv_nodes: kv.node_count,
                        semantic_entries: e.semantic_entries(),
                        requests: e.requests_served(),
                    }
                };
                if write_line(&mut writer, &ev).is_err() {
                    return;
                }
            }
            WireRequest::Shutdown => {
                stop.store(true, Ordering::SeqCst);
                let _ = write_line(&mut writer, &WireEvent::Ok);
                return;
            }
        }
    }
}

pub struct WireClient {
    writer: TcpStream,
    reader: BufReader<TcpStream>,
    queries: u64,
}

impl WireClient {
    pub fn connect(addr: SocketAddr) -> Result<WireClient> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let reader = BufReader::new(stream.try_clone()?);
        Ok(WireClient { writer: stream, reader, queries: 0 })
    }

    fn send(&mut self, req: &WireRequest) -> Result<()> {
        let mut line = serde_json::to_string(req)?;
        line.push('\n');
        self.writer.write_all(line.as_bytes())?;
        self.writer.flush()?;
        Ok(())
    }

    fn read_event(&mut self) -> Result<WireEvent> {
        let mut line = String::new();
        loop {
            line.clear();
            let n = self.reader.read_line(&mut line)?;
            if n == 0 {
                return Err(Error::Transport("server closed the connection".into()));
            }
            if !line.trim().is_empty() {
                return Ok(serde_json::from_str(&line)?);
            }
        }
    }

    pub fn stats(&mut self) -> Result<WireEvent> {
        self.send(&WireRequest::Stats)?;
        match self.read_event()? {
            e @ WireEvent::Stats { .. } => Ok(e),
            WireEvent::Error { message } => Err(Error::Transport(message)),
            other => Err(Error::Transport(format!("unexpected reply {other:?}"))),
        }
    }

    pub fn shutdown_server(&mut self) -> Result<()> {
        self.send(&WireRequest::Shutdown)?;
        match self.read_event()? {
            WireEvent::Ok => Ok(()),
            other => Err(Error::Transport(format!("unexpected reply {other:?}"))),
        }
    }
}

impl EngineClient for WireClient {
    fn chat(&mut self, req: &ChatRequest) -> Result<Observation> {
        self.queries += 1;
        self.send(&WireRequest::chat(req))?;
        if req.stream {
            let mut ttft = None;
            let mut words: Vec<String> = Vec::new();
            loop {
                match self.read_event()? {
                    WireEvent::Token { t_ms, text } => {
                        ttft.get_or_insert(t_ms);
                        words.push(text);
                    }
                    WireEvent::Eos { t_ms } => {
                        return Ok(Observation {
                            ttft_ms: ttft.unwrap_or(t_ms),
                            eos_ms: t_ms,
                            text: words.join(" "),
                        });
                    }
                    WireEvent::Error { message } => return Err(Error::Transport(message)),
                    other => {
                        return Err(Error::Transport(format!("unexpected event {other:?}")));
                    }
                }
            }
        } else {
            match self.read_event()? {
                WireEvent::Completion { ttft_ms, eos_ms, text } => {
                    Ok(Observation { ttft_ms, eos_ms, text })
                }
                WireEvent::Error { message } => Err(Error::Transport(message)),
                other => Err(Error::Transport(format!("unexpected reply {other:?}"))),
            }
        }
    }

    fn flush(&mut self, scope: FlushScope) -> Result<()> {
        self.send(&WireRequest::Flush { scope })?;
        match self.read_event()? {
            WireEvent::Ok => Ok(()),
            WireEvent::Error { message } => Err(Error::Transport(message)),
            other => Err(Error::Transport(format!("unexpected reply {other:?}"))),
        }
    }

    fn queries_sent(&self) -> u64 {
        self.queries
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::EngineConfig;

    fn quiet_engine() -> Engine {
        let mut cfg = EngineConfig::default();
        cfg.latency.noise_sigma_ms = 0.0;
        Engine::from_config(cfg).unwrap()
    }

    #[test]
    fn in_process_client_observes_only_timing_and_text() {
        let mut c = InProcessClient::new(quiet_engine());
        let req = ChatRequest::system_only("you plan balanced travel routes");
        let obs = c.chat(&req).unwrap();
        assert!(obs.ttft_ms > 0.0);
        assert!(obs.eos_ms > obs.ttft_ms);
        assert_eq!(c.queries_sent(), 1);
        let warm = c.chat(&req).unwrap();
        assert!(warm.ttft_ms < obs.ttft_ms, "second pass must be faster");
    }

    #[test]
    fn request_envelope_wire_shape_is_stable() {
        let req = WireRequest::chat(&ChatRequest::system_only("you are"));
        let v: serde_json::Value = serde_json::to_value(&req).unwrap();
        assert_eq!(v["mode"], "chat");
        assert_eq!(v["messages"][0]["role"], "system");
        assert_eq!(v["messages"][0]["content"], "you are");
        assert_eq!(v["stream"], true);
        let flush: WireRequest = serde_json::from_str(r#"{"mode":"flush"}"#).unwrap();
        assert!(matches!(flush, WireRequest::Flush { scope: FlushScope::All }));
    }

    #[test]
    fn event_lines_match_documented_shapes() {
        let token = WireEvent::Token { t_ms: 47.0, text: "word".into() };
        assert_eq!(
            serde_json::to_string(&token).unwrap(),
            r#"{"event":"token","t_ms":47.0,"text":"word"}"#
        );
        let eos = WireEvent::Eos { t_ms: 100.5 };
        assert_eq!(serde_json::to_string(&eos).unwrap(), r#"{"event":"eos","t_ms":100.5}"#);
    }
}
