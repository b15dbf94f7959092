//! Stand-in robot endpoint. Accepts one execution stream at a time and
//! echoes every line back as `{"recv_t": <s>, "state": <line>}`, with the
//! received line embedded verbatim. Echoes are also appended to a JSONL log.

use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use thiserror::Error;

const POLL: Duration = Duration::from_millis(20);
/// Accept polling interval. Arrival times are measured from the accept, so
/// a slow accept would make the first state look early.
const ACCEPT_POLL: Duration = Duration::from_millis(1);

#[derive(Debug, Error)]
pub enum MockError {
    #[error("cannot bind {addr}: {source}")]
    BindFailure { addr: String, source: io::Error },
    #[error("cannot open log {path}: {source}")]
    Log { path: PathBuf, source: io::Error },
}

/// One received line with its arrival time, seconds since the connection
/// was accepted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Received {
    pub recv_t: f64,
    pub line: String,
}

#[derive(Serialize)]
struct Echo<'a> {
    recv_t: f64,
    state: &'a RawValue,
}

#[derive(Serialize)]
struct BadEcho<'a> {
    recv_t: f64,
    error: &'a str,
}

fn echo_line(recv_t: f64, line: &str) -> String {
    match serde_json::from_str::<&RawValue>(line) {
        Ok(raw) => serde_json::to_string(&Echo { recv_t, state: raw }),
        Err(e) => serde_json::to_string(&BadEcho { recv_t, error: &e.to_string() }),
    }
    .expect("echo serialises")
}

pub struct MockRobot {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    received: Arc<Mutex<Vec<Received>>>,
    handle: Option<JoinHandle<()>>,
}

impl MockRobot {
    /// Binds `listen` and serves connections on a background thread.
    pub fn spawn(listen: &str, log: Option<PathBuf>) -> Result<Self, MockError> {
        let listener =
            TcpListener::bind(listen).map_err(|source| MockError::BindFailure { addr: listen.to_string(), source })?;
        let addr = listener.local_addr().map_err(|source| MockError::BindFailure { addr: listen.to_string(), source })?;
        listener
            .set_nonblocking(true)
            .map_err(|source| MockError::BindFailure { addr: listen.to_string(), source })?;
        let log = match log {
            Some(path) => Some(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|source| MockError::Log { path, source })?,
            ),
            None => None,
        };
        let stop = Arc::new(AtomicBool::new(false));
        let received = Arc::new(Mutex::new(Vec::new()));
        let handle = {
            let (stop, received) = (stop.clone(), received.clone());
            thread::spawn(move || accept_loop(listener, log, &stop, &received))
        };
        Ok(Self { addr, stop, received, handle: Some(handle) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Everything received so far, across connections.
    pub fn received(&self) -> Vec<Received> {
        self.received.lock().expect("mock log lock").clone()
    }

    /// Blocks until the serving thread exits (it never does on its own).
    pub fn join(mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop_thread();
    }

    fn stop_thread(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for MockRobot {
    fn drop(&mut self) {
        self.stop_thread();
    }
}

fn accept_loop(listener: TcpListener, log: Option<File>, stop: &AtomicBool, received: &Mutex<Vec<Received>>) {
    let mut log = log.map(BufWriter::new);
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                log::info!("mock robot: connection from {peer}");
                if let Err(e) = serve(stream, &mut log, stop, received) {
                    log::warn!("mock robot: connection from {peer} ended: {e}");
                }
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(ACCEPT_POLL),
            Err(e) => {
                log::error!("mock robot: accept failed: {e}");
                thread::sleep(POLL);
            }
        }
    }
}

fn serve(
    mut stream: TcpStream,
    log: &mut Option<BufWriter<File>>,
    stop: &AtomicBool,
    received: &Mutex<Vec<Received>>,
) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(POLL))?;
    let accepted = Instant::now();
    let mut pending: Vec<u8> = Vec::new();
    let mut chunk = [0u8; 4096];
    while !stop.load(Ordering::SeqCst) {
        let n = match stream.read(&mut chunk) {
            Ok(0) => return Ok(()),
            Ok(n) => n,
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => continue,
            Err(e) => return Err(e),
        };
        let recv_t = accepted.elapsed().as_secs_f64();
        pending.extend_from_slice(&chunk[..n]);
        while let Some(pos) = pending.iter().position(|&b| b == b'\n') {
            let raw: Vec<u8> = pending.drain(..=pos).collect();
            let line = String::from_utf8_lossy(&raw[..raw.len() - 1]).trim_end_matches('\r').to_string();
            if line.trim().is_empty() {
                continue;
            }
            let mut echo = echo_line(recv_t, &line);
            echo.push('\n');
            stream.write_all(echo.as_bytes())?;
            if let Some(w) = log.as_mut() {
                w.write_all(echo.as_bytes())?;
                w.flush()?;
            }
            received.lock().expect("mock log lock").push(Received { recv_t, line });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_embeds_line_verbatim() {
        let line = r#"{"type":"RobotState","seq":3,"payload":{"t":0.30000000000000004}}"#;
        let echo = echo_line(1.5, line);
        assert_eq!(echo, format!(r#"{{"recv_t":1.5,"state":{line}}}"#));
    }

    #[test]
    fn garbage_is_reported_not_echoed() {
        let echo: serde_json::Value = serde_json::from_str(&echo_line(0.0, "not json")).unwrap();
        assert!(echo.get("error").is_some());
        assert!(echo.get("state").is_none());
    }
}
