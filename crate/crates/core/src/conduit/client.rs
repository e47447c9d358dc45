use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::connection::Connection;
use super::reference::ObjectRef;
use crate::error::{Error, ErrorCode, Result};

/// Reserved method answered by every process dispatcher for any object name.
pub const PING_METHOD: &str = "__ping";

/// How a [`Client`] reacts to the three connection failure situations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConnectionPolicy {
    /// Keep re-resolving and reconnecting while the target has never been reached.
    pub wait_for_presence: bool,
    /// Send `__ping` before each invocation.
    pub ping_before_invoke: bool,
    /// Re-resolve the reference through the name service after a failure.
    pub refresh_on_failure: bool,
    pub max_attempts: u32,
    pub retry_backoff_ms: u64,
    pub call_timeout_ms: u64,
}

impl Default for ConnectionPolicy {
    fn default() -> Self {
        ConnectionPolicy {
            wait_for_presence: false,
            ping_before_invoke: false,
            refresh_on_failure: false,
            max_attempts: 1,
            retry_backoff_ms: 100,
            call_timeout_ms: 2000,
        }
    }
}

impl ConnectionPolicy {
    /// Ping before every call and re-resolve on failure.
    pub fn recovering(max_attempts: u32) -> Self {
        ConnectionPolicy {
            ping_before_invoke: true,
            refresh_on_failure: true,
            max_attempts,
            ..Default::default()
        }
    }

    pub fn waiting(max_attempts: u32, retry_backoff_ms: u64) -> Self {
        ConnectionPolicy {
            wait_for_presence: true,
            max_attempts,
            retry_backoff_ms,
            ..Default::default()
        }
    }

    pub fn with_timeout_ms(mut self, ms: u64) -> Self {
        self.call_timeout_ms = ms;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.call_timeout_ms == 0 {
            return Err(Error::bad_args("call_timeout must be positive"));
        }
        if self.max_attempts == 0 {
            return Err(Error::bad_args("max_attempts must be at least 1"));
        }
        Ok(())
    }

    pub fn call_timeout(&self) -> Duration {
        Duration::from_millis(self.call_timeout_ms)
    }

    pub fn retry_backoff(&self) -> Duration {
        Duration::from_millis(self.retry_backoff_ms)
    }

    /// Upper bound on the time one `invoke` may take.
    pub fn worst_case(&self) -> Duration {
        self.call_timeout()
            + (self.retry_backoff() + self.call_timeout()) * self.max_attempts
    }
}

/// Maps global object names to references (the name service, client side).
pub trait Resolver: Send + Sync {
    fn resolve(&self, name: &str, timeout: Duration) -> Result<ObjectRef>;
}

/// What a client is pointed at.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    Ref(ObjectRef),
    Name(String),
}

impl Target {
    fn name(&self) -> &str {
        match self {
            Target::Ref(r) => &r.object,
            Target::Name(n) => n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttemptStage {
    Resolve,
    Connect,
    Ping,
    Send,
}

/// One failed recovery cycle, reported to the attempt observer.
#[derive(Debug, Clone)]
pub struct AttemptFailure {
    pub target: String,
    pub attempt: u32,
    pub stage: AttemptStage,
    pub error: Error,
}

pub type AttemptObserver = Arc<dyn Fn(&AttemptFailure) + Send + Sync>;

struct Link {
    current: Option<ObjectRef>,
    conn: Option<Arc<Connection>>,
    ever_connected: bool,
    stale: bool,
}

/// The connection abstraction: one logical target, a policy, and the
/// recovery logic for initial, previously-successful, and mid-invocation
/// failures. Safe to share across threads.
pub struct Client {
    target: Target,
    policy: ConnectionPolicy,
    resolver: Option<Arc<dyn Resolver>>,
    observer: Option<AttemptObserver>,
    link: Mutex<Link>,
    cycles: AtomicU64,
}

impl Client {
    pub fn new(target: Target, policy: ConnectionPolicy, resolver: Option<Arc<dyn Resolver>>) -> Result<Client> {
        policy.validate()?;
        if resolver.is_none() {
            if let Target::Name(n) = &target {
                return Err(Error::bad_args(format!(
                    "target {n:?} is a name but no resolver was supplied"
                )));
            }
            if policy.refresh_on_failure || policy.wait_for_presence {
                log::debug!("client for {} has recovery flags but no resolver", target.name());
            }
        }
        let current = match &target {
            Target::Ref(r) => Some(r.clone()),
            Target::Name(_) => None,
        };
        Ok(Client {
            target,
            policy,
            resolver,
            observer: None,
            link: Mutex::new(Link {
                current,
                conn: None,
                ever_connected: false,
                stale: false,
            }),
            cycles: AtomicU64::new(0),
        })
    }

    /// A plain client for a fixed reference: no resolver, default policy.
    pub fn to_ref(r: ObjectRef) -> Client {
        Client::new(Target::Ref(r), ConnectionPolicy::default(), None).expect("default policy is valid")
    }

    pub fn with_observer(mut self, observer: AttemptObserver) -> Client {
        self.observer = Some(observer);
        self
    }

    pub fn policy(&self) -> &ConnectionPolicy {
        &self.policy
    }

    pub fn target_name(&self) -> &str {
        self.target.name()
    }

    /// The reference the client currently believes in, if any.
    pub fn current_ref(&self) -> Option<ObjectRef> {
        self.link.lock().current.clone()
    }

    /// Number of connection establishment cycles run so far.
    pub fn connect_cycles(&self) -> u64 {
        self.cycles.load(Ordering::SeqCst)
    }

    pub fn invoke(&self, method: &str, args: Value) -> Result<Value> {
        self.invoke_with_timeout(method, args, self.policy.call_timeout())
    }

    pub fn invoke_with_timeout(&self, method: &str, args: Value, call_timeout: Duration) -> Result<Value> {
        let max = self.policy.max_attempts.max(1);
        let mut last: Option<Error> = None;
        for attempt in 1..=max {
            let started = Instant::now();
            let conn = match self.ensure_connected(attempt, call_timeout) {
                Ok(c) => c,
                Err((stage, e)) => {
                    let ever = self.link.lock().ever_connected;
                    let retry = if ever {
                        self.policy.refresh_on_failure
                    } else {
                        self.policy.wait_for_presence
                    };
                    let code = if ever { ErrorCode::CommFailure } else { ErrorCode::ConnectFailed };
                    let err = Error::new(code, format!("{}: {}", self.target.name(), e.message));
                    self.report(attempt, stage, &err);
                    if !retry {
                        return Err(err);
                    }
                    last = Some(err);
                    self.backoff(attempt, max);
                    continue;
                }
            };

            if self.policy.ping_before_invoke {
                let budget = call_timeout.saturating_sub(started.elapsed()).max(Duration::from_millis(1));
                if let Err(e) = conn.call(self.target.name(), PING_METHOD, Value::Null, budget) {
                    let err = Error::comm_failure(format!("{}: ping failed: {}", self.target.name(), e.message));
                    self.invalidate(&conn);
                    self.report(attempt, AttemptStage::Ping, &err);
                    if !self.policy.refresh_on_failure {
                        return Err(err);
                    }
                    last = Some(err);
                    self.backoff(attempt, max);
                    continue;
                }
            }

            let pending = match conn.send(self.target.name(), method, args.clone()) {
                Ok(p) => p,
                Err(e) => {
                    self.invalidate(&conn);
                    self.report(attempt, AttemptStage::Send, &e);
                    if !self.policy.refresh_on_failure {
                        return Err(e);
                    }
                    last = Some(e);
                    self.backoff(attempt, max);
                    continue;
                }
            };
            // Once the call is on the wire it may have executed: never retried.
            let result = pending.wait(call_timeout);
            if let Err(e) = &result {
                if e.code == ErrorCode::CommFailure {
                    self.invalidate(&conn);
                }
            }
            return result;
        }
        Err(last.unwrap_or_else(|| Error::connect_failed(self.target.name().to_string())))
    }

    /// True iff a `__ping` completes within the call timeout. Never retries.
    pub fn ping(&self) -> bool {
        let timeout = self.policy.call_timeout();
        match self.ensure_connected(0, timeout) {
            Ok(conn) => match conn.call(self.target.name(), PING_METHOD, Value::Null, timeout) {
                Ok(_) => true,
                Err(e) => {
                    if e.code == ErrorCode::CommFailure {
                        self.invalidate(&conn);
                    }
                    false
                }
            },
            Err(_) => false,
        }
    }

    /// Drops the current connection; the next call reconnects.
    pub fn disconnect(&self) {
        let mut link = self.link.lock();
        if let Some(c) = link.conn.take() {
            c.close();
        }
    }

    fn ensure_connected(&self, attempt: u32, budget: Duration) -> std::result::Result<Arc<Connection>, (AttemptStage, Error)> {
        let mut link = self.link.lock();
        if let Some(c) = link.conn.take() {
            if c.is_alive() {
                link.conn = Some(c.clone());
                return Ok(c);
            }
            // A lost connection is reported once; the next call reconnects.
            if !self.policy.refresh_on_failure {
                return Err((AttemptStage::Send, Error::comm_failure("connection lost")));
            }
            link.stale = true;
        }
        self.cycles.fetch_add(1, Ordering::SeqCst);
        let started = Instant::now();
        let needs_resolve = link.current.is_none() || (link.stale && self.resolver.is_some());
        if needs_resolve {
            let resolver = self
                .resolver
                .as_ref()
                .ok_or_else(|| (AttemptStage::Resolve, Error::no_such_object("no resolver")))?;
            match resolver.resolve(self.target.name(), budget) {
                Ok(r) => {
                    if link.current.as_ref() != Some(&r) {
                        log::debug!("{}: resolved to {r} (attempt {attempt})", self.target.name());
                    }
                    link.current = Some(r);
                    link.stale = false;
                }
                Err(e) => return Err((AttemptStage::Resolve, e)),
            }
        }
        let r = link.current.clone().expect("resolved above");
        let remaining = budget.saturating_sub(started.elapsed()).max(Duration::from_millis(1));
        match Connection::open(&r.addr(), remaining) {
            Ok(c) => {
                let c = Arc::new(c);
                link.conn = Some(c.clone());
                link.ever_connected = true;
                Ok(c)
            }
            Err(e) => {
                link.stale = true;
                Err((AttemptStage::Connect, e))
            }
        }
    }

    fn invalidate(&self, conn: &Arc<Connection>) {
        conn.close();
        let mut link = self.link.lock();
        if link.conn.as_ref().is_some_and(|c| Arc::ptr_eq(c, conn)) {
            link.conn = None;
        }
        link.stale = true;
    }

    fn backoff(&self, attempt: u32, max: u32) {
        if attempt < max && self.policy.retry_backoff_ms > 0 {
            thread::sleep(self.policy.retry_backoff());
        }
    }

    fn report(&self, attempt: u32, stage: AttemptStage, error: &Error) {
        log::debug!(
            "{}: attempt {attempt} failed at {stage:?}: {error}",
            self.target.name()
        );
        if let Some(obs) = &self.observer {
            obs(&AttemptFailure {
                target: self.target.name().to_string(),
                attempt,
                stage,
                error: error.clone(),
            });
        }
    }
}

/// One-shot liveness probe of an endpoint.
pub fn ping(target: &ObjectRef, timeout: Duration) -> bool {
    match Connection::open(&target.addr(), timeout) {
        Ok(conn) => conn.call(&target.object, PING_METHOD, Value::Null, timeout).is_ok(),
        Err(_) => false,
    }
}
