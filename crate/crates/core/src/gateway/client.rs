//! Client for backends reachable over TCP or a spawned process's stdio.
//!
//! Requests are pipelined: up to `max_in_flight` may be outstanding at once,
//! and responses are matched back to callers by request id, so the backend is
//! free to answer out of order.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;

use super::protocol::{self, BackendDescriptor, Message, ScoringRequest, ScoringResponse};
use super::{GatewayError, ScoringBackend};

pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;

type Pending = Arc<Mutex<Option<HashMap<String, Sender<ScoringResponse>>>>>;

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            permits: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().expect("semaphore poisoned");
        while *p == 0 {
            p = self.cv.wait(p).expect("semaphore poisoned");
        }
        *p -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().expect("semaphore poisoned") += 1;
        self.0.cv.notify_one();
    }
}

pub struct RemoteBackend {
    descriptor: BackendDescriptor,
    writer: Mutex<Box<dyn Write + Send>>,
    pending: Pending,
    slots: Semaphore,
    next_id: AtomicU64,
    reader: Option<JoinHandle<()>>,
    child: Option<Mutex<Child>>,
    tcp: Option<TcpStream>,
}

impl RemoteBackend {
    pub fn connect_tcp(addr: impl ToSocketAddrs, max_in_flight: usize) -> Result<Self, GatewayError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let read_half = stream.try_clone()?;
        let control = stream.try_clone()?;
        let mut backend = Self::handshake(Box::new(read_half), Box::new(stream), max_in_flight, None)?;
        backend.tcp = Some(control);
        Ok(backend)
    }

    /// Spawns `program args...` and speaks the protocol over its stdin/stdout.
    pub fn spawn(program: &str, args: &[String], max_in_flight: usize) -> Result<Self, GatewayError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Self::handshake(Box::new(stdout), Box::new(stdin), max_in_flight, Some(child))
    }

    /// Reads the descriptor line, then starts the response dispatcher.
    pub fn handshake(
        read: Box<dyn Read + Send>,
        write: Box<dyn Write + Send>,
        max_in_flight: usize,
        child: Option<Child>,
    ) -> Result<Self, GatewayError> {
        let mut reader = BufReader::new(read);
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Err(GatewayError::Closed);
        }
        let descriptor = match protocol::decode(&line)? {
            Message::Descriptor(d) => d,
            other => {
                return Err(GatewayError::Protocol(format!(
                    "expected descriptor handshake, got {other:?}"
                )))
            }
        };
        if descriptor.context_window == 0 {
            return Err(GatewayError::Protocol("descriptor has zero context_window".into()));
        }
        let pending: Pending = Arc::new(Mutex::new(Some(HashMap::new())));
        let dispatch = Arc::clone(&pending);
        let handle = std::thread::spawn(move || dispatch_responses(reader, dispatch));
        Ok(Self {
            descriptor,
            writer: Mutex::new(write),
            pending,
            slots: Semaphore::new(max_in_flight.max(1)),
            next_id: AtomicU64::new(0),
            reader: Some(handle),
            child: child.map(Mutex::new),
            tcp: None,
        })
    }
}

fn dispatch_responses(mut reader: BufReader<Box<dyn Read + Send>>, pending: Pending) {
    let mut line = String::new();
    loop {
        line.clear();
        match reader.read_line(&mut line) {
            Ok(0) | Err(_) => break,
            Ok(_) => {}
        }
        match protocol::decode(&line) {
            Ok(Message::Response(resp)) => {
                let waiter = pending
                    .lock()
                    .expect("pending poisoned")
                    .as_mut()
                    .and_then(|m| m.remove(&resp.request_id));
                match waiter {
                    Some(tx) => {
                        let _ = tx.send(resp);
                    }
                    None => log::warn!("dropping response for unknown request `{}`", resp.request_id),
                }
            }
            Ok(other) => log::warn!("ignoring unexpected message {other:?}"),
            Err(e) => log::warn!("ignoring line from backend: {e}"),
        }
    }
    // Dropping the senders wakes every waiter with a disconnect.
    pending.lock().expect("pending poisoned").take();
}

impl ScoringBackend for RemoteBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn call(&self, request: &ScoringRequest) -> Result<ScoringResponse, GatewayError> {
        let _permit = self.slots.acquire();
        // Caller ids need not be unique across threads; the wire id is.
        let wire_id = format!(
            "{}#{}",
            request.request_id,
            self.next_id.fetch_add(1, Ordering::Relaxed)
        );
        let (tx, rx) = mpsc::channel();
        match self.pending.lock().expect("pending poisoned").as_mut() {
            Some(map) => {
                map.insert(wire_id.clone(), tx);
            }
            None => return Err(GatewayError::Closed),
        }
        let mut wire = request.clone();
        wire.request_id = wire_id.clone();
        let line = protocol::encode(&Message::Request(wire));
        let sent = {
            let mut w = self.writer.lock().expect("writer poisoned");
            w.write_all(line.as_bytes()).and_then(|_| w.flush())
        };
        if let Err(e) = sent {
            if let Some(map) = self.pending.lock().expect("pending poisoned").as_mut() {
                map.remove(&wire_id);
            }
            return Err(e.into());
        }
        let mut resp = rx.recv().map_err(|_| GatewayError::Closed)?;
        resp.request_id = request.request_id.clone();
        Ok(resp)
    }
}

impl Drop for RemoteBackend {
    fn drop(&mut self) {
        if let Some(child) = &self.child {
            let mut child = child.lock().expect("child poisoned");
            let _ = child.kill();
            let _ = child.wait();
        }
        if let Some(stream) = &self.tcp {
            let _ = stream.shutdown(std::net::Shutdown::Both);
        }
        // Other transports may not close on our side; leave their reader detached.
        if self.child.is_some() || self.tcp.is_some() {
            if let Some(h) = self.reader.take() {
                let _ = h.join();
            }
        }
    }
}
