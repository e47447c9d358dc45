//! Decoupled, per-subscriber ordered delivery of updates.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;

use parking_lot::{Condvar, Mutex};

use super::director::{Director, Update};
use crate::conduit::{Client, ConnectionPolicy, ObjectRef, Target};
use crate::error::{Error, Result};

/// Where an outbox hands its updates.
pub trait UpdateSink: Send + Sync {
    fn deliver(&self, update: &Update) -> Result<()>;
}

/// Produces the sink for a subscriber reference.
pub trait SinkFactory: Send + Sync {
    fn sink_for(&self, subscriber: &ObjectRef) -> Result<Arc<dyn UpdateSink>>;
}

/// Delivers by invoking the subscriber's `update` method over conduit.
pub struct RemoteSink {
    client: Client,
}

impl RemoteSink {
    /// Each delivery is a single attempt; the outbox owns retrying.
    pub fn new(subscriber: &ObjectRef, policy: &ConnectionPolicy) -> Result<RemoteSink> {
        let single = ConnectionPolicy {
            wait_for_presence: false,
            refresh_on_failure: false,
            max_attempts: 1,
            ..policy.clone()
        };
        Ok(RemoteSink {
            client: Client::new(Target::Ref(subscriber.clone()), single, None)?,
        })
    }
}

impl UpdateSink for RemoteSink {
    fn deliver(&self, update: &Update) -> Result<()> {
        let v = serde_json::to_value(update).map_err(|e| Error::app(e.to_string()))?;
        self.client.invoke("update", v).map(|_| ())
    }
}

/// Creates [`RemoteSink`]s with a fixed policy.
pub struct RemoteSinks {
    pub policy: ConnectionPolicy,
}

impl SinkFactory for RemoteSinks {
    fn sink_for(&self, subscriber: &ObjectRef) -> Result<Arc<dyn UpdateSink>> {
        Ok(Arc::new(RemoteSink::new(subscriber, &self.policy)?))
    }
}

impl<D: Director> UpdateSink for D {
    fn deliver(&self, update: &Update) -> Result<()> {
        self.update(update.clone())
    }
}

/// In-process sinks keyed by subscriber reference. Deliveries look the
/// subscriber up each time, so removing it makes later deliveries fail.
#[derive(Default, Clone)]
pub struct LocalSinks {
    sinks: Arc<Mutex<HashMap<ObjectRef, Arc<dyn UpdateSink>>>>,
}

impl LocalSinks {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&self, subscriber: ObjectRef, sink: Arc<dyn UpdateSink>) {
        self.sinks.lock().insert(subscriber, sink);
    }

    pub fn remove(&self, subscriber: &ObjectRef) {
        self.sinks.lock().remove(subscriber);
    }
}

struct LocalForward {
    table: LocalSinks,
    key: ObjectRef,
}

impl UpdateSink for LocalForward {
    fn deliver(&self, update: &Update) -> Result<()> {
        let sink = self.table.sinks.lock().get(&self.key).cloned();
        match sink {
            Some(s) => s.deliver(update),
            None => Err(Error::comm_failure(format!("{} unreachable", self.key))),
        }
    }
}

impl SinkFactory for LocalSinks {
    fn sink_for(&self, subscriber: &ObjectRef) -> Result<Arc<dyn UpdateSink>> {
        Ok(Arc::new(LocalForward {
            table: self.clone(),
            key: subscriber.clone(),
        }))
    }
}

/// Outbox retry and overflow behaviour.
#[derive(Debug, Clone)]
pub struct DeliveryPolicy {
    /// Attempts per update before the subscriber is declared dead.
    pub max_attempts: u32,
    pub retry_backoff_ms: u64,
    /// Queue bound; when full the oldest pending update is dropped.
    pub capacity: Option<usize>,
}

impl Default for DeliveryPolicy {
    fn default() -> Self {
        DeliveryPolicy {
            max_attempts: 3,
            retry_backoff_ms: 50,
            capacity: None,
        }
    }
}

impl DeliveryPolicy {
    pub fn from_connection(p: &ConnectionPolicy) -> Self {
        DeliveryPolicy {
            max_attempts: p.max_attempts.max(1),
            retry_backoff_ms: p.retry_backoff_ms,
            capacity: None,
        }
    }
}

struct Shared {
    queue: Mutex<VecDeque<Update>>,
    wake: Condvar,
    closed: AtomicBool,
    delivered: AtomicU64,
    dropped: AtomicU64,
}

pub type FailureHook = Box<dyn FnOnce(Error) + Send>;

/// One subscriber's ordered delivery queue, drained by its own thread.
pub struct Outbox {
    shared: Arc<Shared>,
    capacity: Option<usize>,
}

impl Outbox {
    /// `on_failure` runs once, on the delivery thread, when an update could
    /// not be delivered within `policy.max_attempts` attempts.
    pub fn spawn(label: &str, sink: Arc<dyn UpdateSink>, policy: DeliveryPolicy, on_failure: FailureHook) -> Outbox {
        let shared = Arc::new(Shared {
            queue: Mutex::new(VecDeque::new()),
            wake: Condvar::new(),
            closed: AtomicBool::new(false),
            delivered: AtomicU64::new(0),
            dropped: AtomicU64::new(0),
        });
        let s = shared.clone();
        let capacity = policy.capacity;
        thread::Builder::new()
            .name(format!("outbox {label}"))
            .spawn(move || drain(s, sink, policy, on_failure))
            .expect("spawn outbox thread");
        Outbox { shared, capacity }
    }

    /// Queues an update; false if the outbox is closed.
    pub fn push(&self, update: Update) -> bool {
        if self.is_closed() {
            return false;
        }
        let mut q = self.shared.queue.lock();
        if let Some(cap) = self.capacity {
            if q.len() >= cap {
                q.pop_front();
                let n = self.shared.dropped.fetch_add(1, Ordering::SeqCst) + 1;
                log::warn!("outbox overflow: dropped oldest update ({n} total)");
            }
        }
        q.push_back(update);
        drop(q);
        self.shared.wake.notify_one();
        true
    }

    pub fn close(&self) {
        self.shared.closed.store(true, Ordering::SeqCst);
        self.shared.queue.lock().clear();
        self.shared.wake.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.shared.closed.load(Ordering::SeqCst)
    }

    pub fn delivered(&self) -> u64 {
        self.shared.delivered.load(Ordering::SeqCst)
    }

    pub fn dropped(&self) -> u64 {
        self.shared.dropped.load(Ordering::SeqCst)
    }

    pub fn pending(&self) -> usize {
        self.shared.queue.lock().len()
    }
}

impl Drop for Outbox {
    fn drop(&mut self) {
        self.close();
    }
}

fn drain(shared: Arc<Shared>, sink: Arc<dyn UpdateSink>, policy: DeliveryPolicy, on_failure: FailureHook) {
    let backoff = std::time::Duration::from_millis(policy.retry_backoff_ms);
    loop {
        let next = {
            let mut q = shared.queue.lock();
            loop {
                if shared.closed.load(Ordering::SeqCst) {
                    return;
                }
                if let Some(u) = q.pop_front() {
                    break u;
                }
                shared.wake.wait(&mut q);
            }
        };
        let mut last_err = None;
        for attempt in 1..=policy.max_attempts.max(1) {
            if shared.closed.load(Ordering::SeqCst) {
                return;
            }
            match sink.deliver(&next) {
                Ok(()) => {
                    last_err = None;
                    break;
                }
                Err(e) => {
                    log::debug!("delivery attempt {attempt} of {}#{} failed: {e}", next.mapper, next.seq);
                    last_err = Some(e);
                    if attempt < policy.max_attempts && !backoff.is_zero() {
                        thread::sleep(backoff);
                    }
                }
            }
        }
        match last_err {
            None => {
                shared.delivered.fetch_add(1, Ordering::SeqCst);
            }
            Some(e) => {
                shared.closed.store(true, Ordering::SeqCst);
                shared.queue.lock().clear();
                on_failure(e);
                return;
            }
        }
    }
}
