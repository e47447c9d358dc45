use std::collections::HashMap;
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, SyncSender};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use parking_lot::Mutex;
use serde_json::Value;

use super::envelope::{Body, Envelope};
use super::frame::{read_frame, write_frame};
use crate::error::{Error, Result};

type ReplySlot = SyncSender<Result<Value>>;

struct Shared {
    pending: Mutex<HashMap<u64, ReplySlot>>,
    dead: AtomicBool,
}

impl Shared {
    fn fail_all(&self, why: &str) {
        self.dead.store(true, Ordering::SeqCst);
        let drained: Vec<_> = self.pending.lock().drain().collect();
        for (_, slot) in drained {
            let _ = slot.try_send(Err(Error::comm_failure(why.to_string())));
        }
    }
}

/// A single client-side TCP connection supporting concurrent outstanding calls.
///
/// Replies are matched to callers by envelope id; ids start at 1 for every
/// new connection.
pub struct Connection {
    peer: String,
    writer: Mutex<TcpStream>,
    next_id: AtomicU64,
    shared: Arc<Shared>,
}

/// A call that has been written to the wire and is awaiting its reply.
pub struct PendingCall<'a> {
    conn: &'a Connection,
    id: u64,
    rx: Receiver<Result<Value>>,
}

impl Connection {
    pub fn open(addr: &str, timeout: Duration) -> Result<Connection> {
        let addrs: Vec<_> = addr
            .to_socket_addrs()
            .map_err(|e| Error::connect_failed(format!("{addr}: {e}")))?
            .collect();
        let mut last = None;
        for sa in addrs {
            match TcpStream::connect_timeout(&sa, timeout.max(Duration::from_millis(1))) {
                Ok(stream) => return Self::from_stream(addr, stream),
                Err(e) => last = Some(e),
            }
        }
        Err(Error::connect_failed(match last {
            Some(e) => format!("{addr}: {e}"),
            None => format!("{addr}: no addresses"),
        }))
    }

    fn from_stream(peer: &str, stream: TcpStream) -> Result<Connection> {
        let setup = |e: std::io::Error| Error::connect_failed(format!("{peer}: {e}"));
        stream.set_nodelay(true).map_err(setup)?;
        stream
            .set_write_timeout(Some(Duration::from_secs(5)))
            .map_err(setup)?;
        let mut reader = stream.try_clone().map_err(setup)?;
        let shared = Arc::new(Shared {
            pending: Mutex::new(HashMap::new()),
            dead: AtomicBool::new(false),
        });
        let rshared = shared.clone();
        let rpeer = peer.to_string();
        thread::Builder::new()
            .name(format!("conduit-rx {peer}"))
            .spawn(move || {
                loop {
                    match read_frame(&mut reader) {
                        Ok(Some(bytes)) => match Envelope::from_json(&bytes) {
                            Ok(Envelope {
                                id,
                                body: Body::Reply(result),
                            }) => {
                                let slot = rshared.pending.lock().remove(&id);
                                match slot {
                                    Some(slot) => {
                                        let _ = slot.try_send(result);
                                    }
                                    None => log::debug!("{rpeer}: reply for unknown id {id}"),
                                }
                            }
                            Ok(_) => log::warn!("{rpeer}: unexpected call on client connection"),
                            Err(e) => log::warn!("{rpeer}: {e}"),
                        },
                        Ok(None) => {
                            rshared.fail_all("connection closed by peer");
                            break;
                        }
                        Err(e) => {
                            rshared.fail_all(&format!("connection lost: {e}"));
                            break;
                        }
                    }
                }
            })
            .map_err(|e| Error::connect_failed(e.to_string()))?;
        Ok(Connection {
            peer: peer.to_string(),
            writer: Mutex::new(stream),
            next_id: AtomicU64::new(1),
            shared,
        })
    }

    pub fn peer(&self) -> &str {
        &self.peer
    }

    pub fn is_alive(&self) -> bool {
        !self.shared.dead.load(Ordering::SeqCst)
    }

    /// Writes a call. An error here means the call never left this process.
    pub fn send(&self, object: &str, method: &str, args: Value) -> Result<PendingCall<'_>> {
        if !self.is_alive() {
            return Err(Error::comm_failure(format!("{}: connection is down", self.peer)));
        }
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        let (tx, rx) = mpsc::sync_channel(1);
        self.shared.pending.lock().insert(id, tx);
        if !self.is_alive() {
            self.shared.pending.lock().remove(&id);
            return Err(Error::comm_failure(format!("{}: connection is down", self.peer)));
        }
        let bytes = Envelope::call(id, object, method, args).to_json();
        let written = {
            let mut w = self.writer.lock();
            write_frame(&mut *w, &bytes)
        };
        if let Err(e) = written {
            self.shared.pending.lock().remove(&id);
            self.shared.dead.store(true, Ordering::SeqCst);
            let _ = self.writer.lock().shutdown(Shutdown::Both);
            return Err(Error::comm_failure(format!("{}: send failed: {e}", self.peer)));
        }
        Ok(PendingCall { conn: self, id, rx })
    }

    pub fn call(&self, object: &str, method: &str, args: Value, timeout: Duration) -> Result<Value> {
        self.send(object, method, args)?.wait(timeout)
    }

    pub fn close(&self) {
        let _ = self.writer.lock().shutdown(Shutdown::Both);
        self.shared.dead.store(true, Ordering::SeqCst);
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        self.close();
    }
}

impl PendingCall<'_> {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn wait(self, timeout: Duration) -> Result<Value> {
        match self.rx.recv_timeout(timeout) {
            Ok(result) => result,
            Err(RecvTimeoutError::Timeout) => {
                self.conn.shared.pending.lock().remove(&self.id);
                Err(Error::timeout(format!(
                    "{}: no reply to call {} within {} ms",
                    self.conn.peer,
                    self.id,
                    timeout.as_millis()
                )))
            }
            Err(RecvTimeoutError::Disconnected) => Err(Error::comm_failure(format!(
                "{}: connection lost awaiting reply",
                self.conn.peer
            ))),
        }
    }
}
