//! Network front end. One duplex connection drives the session; a client
//! whose first bytes are `GET ` is upgraded to a websocket carrying the same
//! envelopes as text frames. Connections beyond the first get `Busy`.

use std::io::{self, ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde_json::json;
use tungstenite::{Message, WebSocket};

use crate::executor::{self, ExecError, ExecutionReport, ExecutorConfig};
use crate::protocol::{Envelope, MessageType};
use crate::session::Session;

#[derive(Debug, Clone)]
pub struct ServerOptions {
    /// Robot endpoint for execution streams. Without one, executions are
    /// only mirrored to the client.
    pub robot: Option<String>,
    pub executor: ExecutorConfig,
    /// Read poll interval.
    pub poll: Duration,
    /// Playback tick interval.
    pub tick: Duration,
}

impl Default for ServerOptions {
    fn default() -> Self {
        Self {
            robot: None,
            executor: ExecutorConfig::default(),
            poll: Duration::from_millis(10),
            tick: Duration::from_millis(200),
        }
    }
}

enum Incoming {
    Lines(Vec<String>),
    Nothing,
    Closed,
}

trait Link: Send {
    fn poll(&mut self) -> io::Result<Incoming>;
    fn send(&mut self, env: &Envelope) -> io::Result<()>;
}

struct LineLink {
    stream: TcpStream,
    pending: Vec<u8>,
}

impl Link for LineLink {
    fn poll(&mut self) -> io::Result<Incoming> {
        let mut chunk = [0u8; 8192];
        match self.stream.read(&mut chunk) {
            Ok(0) => Ok(Incoming::Closed),
            Ok(n) => {
                self.pending.extend_from_slice(&chunk[..n]);
                let mut lines = Vec::new();
                while let Some(pos) = self.pending.iter().position(|&b| b == b'\n') {
                    let raw: Vec<u8> = self.pending.drain(..=pos).collect();
                    let line = String::from_utf8_lossy(&raw).trim().to_string();
                    if !line.is_empty() {
                        lines.push(line);
                    }
                }
                Ok(Incoming::Lines(lines))
            }
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => Ok(Incoming::Nothing),
            Err(e) => Err(e),
        }
    }

    fn send(&mut self, env: &Envelope) -> io::Result<()> {
        let mut line = env.to_line();
        line.push('\n');
        self.stream.write_all(line.as_bytes())
    }
}

struct WsLink {
    ws: WebSocket<TcpStream>,
}

fn ws_io(e: tungstenite::Error) -> io::Error {
    match e {
        tungstenite::Error::Io(e) => e,
        other => io::Error::other(other.to_string()),
    }
}

impl Link for WsLink {
    fn poll(&mut self) -> io::Result<Incoming> {
        match self.ws.read() {
            Ok(Message::Text(text)) => {
                Ok(Incoming::Lines(text.as_str().lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect()))
            }
            Ok(Message::Binary(bytes)) => Ok(Incoming::Lines(
                String::from_utf8_lossy(&bytes).lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect(),
            )),
            Ok(Message::Close(_)) => Ok(Incoming::Closed),
            Ok(_) => Ok(Incoming::Nothing),
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                Ok(Incoming::Nothing)
            }
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => Ok(Incoming::Closed),
            Err(e) => Err(ws_io(e)),
        }
    }

    fn send(&mut self, env: &Envelope) -> io::Result<()> {
        self.ws.send(Message::text(env.to_line())).map_err(ws_io)
    }
}

/// Waits for the first bytes and picks line or websocket framing.
fn open_link(stream: TcpStream, poll: Duration, stop: &AtomicBool) -> io::Result<Option<Box<dyn Link>>> {
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(poll))?;
    let mut head = [0u8; 4];
    loop {
        if stop.load(Ordering::SeqCst) {
            return Ok(None);
        }
        match stream.peek(&mut head) {
            Ok(0) => return Ok(None),
            Ok(n) if n >= 4 || head[..n].contains(&b'\n') => {
                if &head[..n] == b"GET " {
                    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
                    let ws = tungstenite::accept(stream).map_err(|e| io::Error::other(e.to_string()))?;
                    ws.get_ref().set_read_timeout(Some(poll))?;
                    return Ok(Some(Box::new(WsLink { ws })));
                }
                return Ok(Some(Box::new(LineLink { stream, pending: Vec::new() })));
            }
            Ok(_) => thread::sleep(poll),
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(e) => return Err(e),
        }
    }
}

fn busy_envelope() -> Envelope {
    Envelope::new(MessageType::Busy, 0, json!({ "message": "another session is already connected" }))
}

enum ExecEvent {
    State(Envelope),
    Done(u64, Result<ExecutionReport, ExecError>),
}

pub struct Server {
    listener: TcpListener,
    session: Arc<Mutex<Session>>,
    options: ServerOptions,
}

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_now();
    }
}

impl Server {
    pub fn bind(listen: &str, session: Arc<Mutex<Session>>, options: ServerOptions) -> io::Result<Self> {
        let listener = TcpListener::bind(listen)?;
        listener.set_nonblocking(true)?;
        Ok(Self { listener, session, options })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Serves until the process exits.
    pub fn run(self) {
        self.accept_loop(Arc::new(AtomicBool::new(false)));
    }

    /// Serves on a background thread until the handle is shut down.
    pub fn spawn(self) -> io::Result<ServerHandle> {
        let addr = self.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let thread = thread::spawn(move || self.accept_loop(flag));
        Ok(ServerHandle { addr, stop, thread: Some(thread) })
    }

    fn accept_loop(self, stop: Arc<AtomicBool>) {
        let busy = Arc::new(AtomicBool::new(false));
        let mut workers: Vec<JoinHandle<()>> = Vec::new();
        while !stop.load(Ordering::SeqCst) {
            match self.listener.accept() {
                Ok((stream, peer)) => {
                    let _ = stream.set_nonblocking(false);
                    if busy.swap(true, Ordering::SeqCst) {
                        log::info!("refusing {peer}: session busy");
                        let (poll, stop) = (self.options.poll, stop.clone());
                        workers.push(thread::spawn(move || refuse(stream, poll, &stop)));
                        continue;
                    }
                    log::info!("client connected from {peer}");
                    let (session, options, busy, stop) =
                        (self.session.clone(), self.options.clone(), busy.clone(), stop.clone());
                    workers.push(thread::spawn(move || {
                        match open_link(stream, options.poll, &stop) {
                            Ok(Some(link)) => run_connection(link, &session, &options, &stop),
                            Ok(None) => {}
                            Err(e) => log::warn!("connection from {peer} failed: {e}"),
                        }
                        log::info!("client {peer} disconnected");
                        busy.store(false, Ordering::SeqCst);
                    }));
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(self.options.poll),
                Err(e) => {
                    log::error!("accept failed: {e}");
                    thread::sleep(self.options.poll);
                }
            }
            workers.retain(|w| !w.is_finished());
        }
        for w in workers {
            let _ = w.join();
        }
    }
}

fn refuse(stream: TcpStream, poll: Duration, stop: &AtomicBool) {
    match open_link(stream, poll, stop) {
        Ok(Some(mut link)) => {
            let _ = link.send(&busy_envelope());
        }
        Ok(None) => {}
        Err(e) => log::warn!("could not send Busy: {e}"),
    }
}

fn run_connection(mut link: Box<dyn Link>, session: &Mutex<Session>, options: &ServerOptions, stop: &AtomicBool) {
    session.lock().expect("session lock").reset_connection();
    let (tx, rx) = mpsc::channel::<ExecEvent>();
    let mut exec: Option<JoinHandle<()>> = None;
    let mut next_tick = Instant::now() + options.tick;

    let send_all = |link: &mut Box<dyn Link>, replies: &[Envelope]| -> io::Result<()> {
        for r in replies {
            link.send(r)?;
        }
        Ok(())
    };

    'outer: while !stop.load(Ordering::SeqCst) {
        match link.poll() {
            Ok(Incoming::Lines(lines)) => {
                for line in lines {
                    let (replies, plan, arm) = {
                        let mut s = session.lock().expect("session lock");
                        let replies = s.handle_line(&line);
                        let plan = s.take_pending_execution();
                        (replies, plan, s.arm().clone())
                    };
                    if send_all(&mut link, &replies).is_err() {
                        break 'outer;
                    }
                    if let Some(plan) = plan {
                        let (tx, robot, cfg) = (tx.clone(), options.robot.clone(), options.executor);
                        exec = Some(thread::spawn(move || {
                            let result = executor::stream(&arm, &plan, robot.as_deref(), &cfg, |env| {
                                let _ = tx.send(ExecEvent::State(env.clone()));
                            });
                            let _ = tx.send(ExecEvent::Done(plan.seq, result));
                        }));
                    }
                }
            }
            Ok(Incoming::Nothing) => {}
            Ok(Incoming::Closed) => break,
            Err(e) => {
                log::warn!("read failed: {e}");
                break;
            }
        }
        while let Ok(ev) = rx.try_recv() {
            let replies = match ev {
                ExecEvent::State(env) => vec![env],
                ExecEvent::Done(seq, result) => session.lock().expect("session lock").finish_execution(seq, result),
            };
            if send_all(&mut link, &replies).is_err() {
                break 'outer;
            }
        }
        if Instant::now() >= next_tick {
            next_tick += options.tick;
            let replies = session.lock().expect("session lock").tick();
            if send_all(&mut link, &replies).is_err() {
                break;
            }
        }
    }

    // A stream in flight still owns the session's Executing mode.
    if let Some(h) = exec {
        let _ = h.join();
        while let Ok(ev) = rx.try_recv() {
            if let ExecEvent::Done(seq, result) = ev {
                session.lock().expect("session lock").finish_execution(seq, result);
            }
        }
    }
}
