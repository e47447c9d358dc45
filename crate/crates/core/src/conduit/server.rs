use std::collections::HashMap;
use std::io;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde_json::Value;

use super::envelope::{Body, Envelope};
use super::frame::{read_frame, write_frame};
use crate::error::{Error, Result};

/// A call received by a [`Listener`], ready to be executed.
pub struct IncomingCall {
    pub id: u64,
    pub object: String,
    pub method: String,
    pub args: Value,
    pub received_at: Instant,
    pub responder: Responder,
}

/// Sink for complete calls, in the order their frames were read.
pub trait Inbox: Send + Sync {
    fn deliver(&self, call: IncomingCall);
}

impl<F: Fn(IncomingCall) + Send + Sync> Inbox for F {
    fn deliver(&self, call: IncomingCall) {
        self(call)
    }
}

/// Sends the reply for one call back over the connection it arrived on.
pub struct Responder {
    id: u64,
    writer: Arc<Mutex<TcpStream>>,
    faults: Arc<ServerFaults>,
}

impl Responder {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn send(self, result: Result<Value>) {
        let delay = self.faults.reply_delay_ms.load(Ordering::SeqCst);
        if delay > 0 {
            thread::spawn(move || {
                thread::sleep(Duration::from_millis(delay));
                self.write(result);
            });
        } else {
            self.write(result);
        }
    }

    fn write(self, result: Result<Value>) {
        let bytes = Envelope::reply(self.id, result).to_json();
        let mut w = self.writer.lock();
        if let Err(e) = write_frame(&mut *w, &bytes) {
            log::debug!("reply {} not delivered: {e}", self.id);
        }
    }
}

#[derive(Default)]
struct ServerFaults {
    reply_delay_ms: AtomicU64,
}

struct ListenerShared {
    addr: SocketAddr,
    stopped: AtomicBool,
    next_conn: AtomicU64,
    conns: Mutex<HashMap<u64, TcpStream>>,
    faults: Arc<ServerFaults>,
}

/// The server side of conduit: accepts connections and hands every complete
/// call frame to an [`Inbox`].
pub struct Listener {
    shared: Arc<ListenerShared>,
    socket: Mutex<Option<TcpListener>>,
}

impl Listener {
    pub fn bind(addr: &str) -> Result<Listener> {
        let socket = TcpListener::bind(addr).map_err(|e| Error::connect_failed(format!("bind {addr}: {e}")))?;
        let local = socket
            .local_addr()
            .map_err(|e| Error::connect_failed(e.to_string()))?;
        Ok(Listener {
            shared: Arc::new(ListenerShared {
                addr: local,
                stopped: AtomicBool::new(false),
                next_conn: AtomicU64::new(1),
                conns: Mutex::new(HashMap::new()),
                faults: Arc::new(ServerFaults::default()),
            }),
            socket: Mutex::new(Some(socket)),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.shared.addr
    }

    /// Starts the accept loop. Can be called once.
    pub fn serve(&self, inbox: Arc<dyn Inbox>) -> Result<()> {
        let socket = self
            .socket
            .lock()
            .take()
            .ok_or_else(|| Error::app("listener already serving"))?;
        let shared = self.shared.clone();
        thread::Builder::new()
            .name(format!("conduit-accept {}", shared.addr))
            .spawn(move || accept_loop(socket, shared, inbox))
            .map_err(|e| Error::app(e.to_string()))?;
        Ok(())
    }

    /// Closes every accepted connection; the listener keeps accepting.
    pub fn drop_connections(&self) {
        let conns: Vec<_> = self.shared.conns.lock().drain().collect();
        for (_, s) in conns {
            let _ = s.shutdown(Shutdown::Both);
        }
    }

    pub fn set_reply_delay(&self, delay: Duration) {
        self.shared
            .faults
            .reply_delay_ms
            .store(delay.as_millis() as u64, Ordering::SeqCst);
    }

    pub fn connection_count(&self) -> usize {
        self.shared.conns.lock().len()
    }

    /// Stops accepting and closes all connections.
    pub fn shutdown(&self) {
        if self.shared.stopped.swap(true, Ordering::SeqCst) {
            return;
        }
        self.socket.lock().take();
        // Wake the blocking accept.
        let _ = TcpStream::connect_timeout(&wake_addr(self.shared.addr), Duration::from_millis(200));
        self.drop_connections();
    }
}

impl Drop for Listener {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn wake_addr(addr: SocketAddr) -> SocketAddr {
    let mut a = addr;
    if a.ip().is_unspecified() {
        a.set_ip(std::net::Ipv4Addr::LOCALHOST.into());
    }
    a
}

fn accept_loop(socket: TcpListener, shared: Arc<ListenerShared>, inbox: Arc<dyn Inbox>) {
    for stream in socket.incoming() {
        if shared.stopped.load(Ordering::SeqCst) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                log::debug!("accept on {}: {e}", shared.addr);
                continue;
            }
        };
        if let Err(e) = start_connection(stream, &shared, inbox.clone()) {
            log::debug!("connection setup on {}: {e}", shared.addr);
        }
    }
}

fn start_connection(stream: TcpStream, shared: &Arc<ListenerShared>, inbox: Arc<dyn Inbox>) -> io::Result<()> {
    stream.set_nodelay(true)?;
    stream.set_write_timeout(Some(Duration::from_secs(5)))?;
    let conn_id = shared.next_conn.fetch_add(1, Ordering::SeqCst);
    shared.conns.lock().insert(conn_id, stream.try_clone()?);
    let mut reader = stream.try_clone()?;
    let writer = Arc::new(Mutex::new(stream));
    let shared = shared.clone();
    thread::Builder::new()
        .name(format!("conduit-conn {conn_id}"))
        .spawn(move || {
            loop {
                let bytes = match read_frame(&mut reader) {
                    Ok(Some(b)) => b,
                    Ok(None) => break,
                    Err(e) => {
                        log::debug!("connection {conn_id}: {e}");
                        break;
                    }
                };
                match Envelope::from_json(&bytes) {
                    Ok(Envelope {
                        id,
                        body: Body::Call { object, method, args },
                    }) => inbox.deliver(IncomingCall {
                        id,
                        object,
                        method,
                        args,
                        received_at: Instant::now(),
                        responder: Responder {
                            id,
                            writer: writer.clone(),
                            faults: shared.faults.clone(),
                        },
                    }),
                    Ok(_) => log::warn!("connection {conn_id}: reply received on server side"),
                    Err(e) => {
                        // Answer with BAD_ARGS when the id is recoverable, otherwise drop the peer.
                        let id = serde_json::from_slice::<Value>(&bytes)
                            .ok()
                            .and_then(|v| v.get("id").and_then(Value::as_u64));
                        match id {
                            Some(id) => Responder {
                                id,
                                writer: writer.clone(),
                                faults: shared.faults.clone(),
                            }
                            .send(Err(e)),
                            None => break,
                        }
                    }
                }
            }
            shared.conns.lock().remove(&conn_id);
            let _ = writer.lock().shutdown(Shutdown::Both);
        })?;
    Ok(())
}
