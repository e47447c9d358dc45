//! The bounded worker pool behind every process.
//!
//! Calls are queued in the order their frames were read. A fixed number of
//! workers take calls strictly from the head of the queue; a call whose
//! object is already executing a serialized method waits at the head (and
//! so does everything behind it), which keeps start order equal to arrival
//! order.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Instant;

use parking_lot::{Condvar, Mutex, RwLock};
use serde_json::Value;

use super::object::Configurable;
use crate::conduit::{IncomingCall, PING_METHOD};
use crate::error::Error;

/// Start record of one executed call, for instrumentation.
#[derive(Debug, Clone)]
pub struct StartRecord {
    pub arrival: u64,
    pub object: String,
    pub method: String,
    pub received_at: Instant,
    pub started_at: Instant,
}

const START_LOG_CAP: usize = 4096;

struct Job {
    arrival: u64,
    object: Configurable,
    call: IncomingCall,
}

#[derive(Default)]
struct State {
    queue: VecDeque<Job>,
    busy: HashSet<String>,
    running: usize,
    started: bool,
    workers: usize,
    stopped: bool,
    max_running: usize,
    starts: VecDeque<StartRecord>,
    calls: BTreeMap<(String, String), u64>,
}

struct Inner {
    state: Mutex<State>,
    wake: Condvar,
    objects: RwLock<HashMap<String, Configurable>>,
    next_arrival: AtomicU64,
    frozen: AtomicBool,
}

/// Routes calls to configurables and executes them on `worker_count` workers.
#[derive(Clone)]
pub struct Dispatcher {
    inner: Arc<Inner>,
}

impl Default for Dispatcher {
    fn default() -> Self {
        Self::new()
    }
}

impl Dispatcher {
    pub fn new() -> Dispatcher {
        Dispatcher {
            inner: Arc::new(Inner {
                state: Mutex::new(State::default()),
                wake: Condvar::new(),
                objects: RwLock::new(HashMap::new()),
                next_arrival: AtomicU64::new(1),
                frozen: AtomicBool::new(false),
            }),
        }
    }

    pub fn add_object(&self, object: Configurable) {
        self.inner
            .objects
            .write()
            .insert(object.name().to_string(), object);
    }

    pub fn object(&self, name: &str) -> Option<Configurable> {
        self.inner.objects.read().get(name).cloned()
    }

    pub fn object_names(&self) -> Vec<String> {
        let mut v: Vec<_> = self.inner.objects.read().keys().cloned().collect();
        v.sort();
        v
    }

    /// Spawns the workers. Calls queued before this point run in arrival order.
    pub fn start(&self, worker_count: usize) {
        let worker_count = worker_count.max(1);
        {
            let mut st = self.inner.state.lock();
            if st.started {
                return;
            }
            st.started = true;
            st.workers = worker_count;
        }
        for i in 0..worker_count {
            let inner = self.inner.clone();
            thread::Builder::new()
                .name(format!("dispatch-worker-{i}"))
                .spawn(move || worker(inner))
                .expect("spawn dispatch worker");
        }
        self.inner.wake.notify_all();
    }

    /// Stops the workers; queued calls are abandoned without reply.
    pub fn stop(&self) {
        self.inner.frozen.store(true, Ordering::SeqCst);
        let mut st = self.inner.state.lock();
        st.stopped = true;
        st.queue.clear();
        drop(st);
        self.inner.wake.notify_all();
    }

    /// Accepts one call. `__ping` and routing errors are answered here;
    /// everything else is queued.
    pub fn deliver(&self, call: IncomingCall) {
        if self.inner.frozen.load(Ordering::SeqCst) {
            return;
        }
        if call.method == PING_METHOD {
            call.responder.send(Ok(Value::Null));
            return;
        }
        let object = match self.object(&call.object) {
            Some(o) => o,
            None => {
                let msg = format!("no object named {:?}", call.object);
                call.responder.send(Err(Error::no_such_object(msg)));
                return;
            }
        };
        if !object.has_method(&call.method) {
            let msg = format!("{}.{}", call.object, call.method);
            call.responder.send(Err(Error::no_such_method(msg)));
            return;
        }
        let mut st = self.inner.state.lock();
        if st.stopped {
            return;
        }
        let arrival = self.inner.next_arrival.fetch_add(1, Ordering::SeqCst);
        st.queue.push_back(Job { arrival, object, call });
        drop(st);
        self.inner.wake.notify_all();
    }

    /// Execution slots; 0 before [`Dispatcher::start`].
    pub fn worker_count(&self) -> usize {
        self.inner.state.lock().workers
    }

    pub fn max_concurrency(&self) -> usize {
        self.inner.state.lock().max_running
    }

    pub fn running(&self) -> usize {
        self.inner.state.lock().running
    }

    pub fn queued(&self) -> usize {
        self.inner.state.lock().queue.len()
    }

    pub fn reset_stats(&self) {
        let mut st = self.inner.state.lock();
        st.max_running = st.running;
        st.starts.clear();
        st.calls.clear();
    }

    /// Most recent execution starts, oldest first.
    pub fn starts(&self) -> Vec<StartRecord> {
        self.inner.state.lock().starts.iter().cloned().collect()
    }

    /// Executed call counts keyed by (object, method).
    pub fn call_counts(&self) -> BTreeMap<(String, String), u64> {
        self.inner.state.lock().calls.clone()
    }

    pub fn total_calls(&self) -> u64 {
        self.inner.state.lock().calls.values().sum()
    }
}

fn runnable(st: &State) -> bool {
    match st.queue.front() {
        Some(job) => job.object.is_concurrent(&job.call.method) || !st.busy.contains(job.object.name()),
        None => false,
    }
}

fn worker(inner: Arc<Inner>) {
    loop {
        let job = {
            let mut st = inner.state.lock();
            while !st.stopped && !runnable(&st) {
                inner.wake.wait(&mut st);
            }
            if st.stopped {
                return;
            }
            let job = st.queue.pop_front().expect("runnable implies non-empty");
            let serialized = !job.object.is_concurrent(&job.call.method);
            if serialized {
                st.busy.insert(job.object.name().to_string());
            }
            st.running += 1;
            st.max_running = st.max_running.max(st.running);
            if st.starts.len() == START_LOG_CAP {
                st.starts.pop_front();
            }
            st.starts.push_back(StartRecord {
                arrival: job.arrival,
                object: job.call.object.clone(),
                method: job.call.method.clone(),
                received_at: job.call.received_at,
                started_at: Instant::now(),
            });
            *st.calls
                .entry((job.call.object.clone(), job.call.method.clone()))
                .or_default() += 1;
            (job, serialized)
        };
        let (job, serialized) = job;
        let Job { object, call, .. } = job;
        let IncomingCall {
            method,
            args,
            responder,
            ..
        } = call;
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| object.call(&method, args)))
            .unwrap_or_else(|_| Err(Error::app(format!("{}.{method} panicked", object.name()))));
        if !inner.frozen.load(Ordering::SeqCst) {
            responder.send(result);
        }
        let mut st = inner.state.lock();
        if serialized {
            st.busy.remove(object.name());
        }
        st.running -= 1;
        drop(st);
        inner.wake.notify_all();
    }
}
