//! Shared service frameworks: central message log, event and alert
//! propagation, and device reservations.
//!
//! The stores live in the system manager process and are exported as
//! `__log`, `__events` and `__reservations`. Other processes reach them
//! through [`ServicesClient`]; framework code talks to either side through
//! the [`ServiceHub`] trait.

mod events;
mod log;
mod remote;
mod reservations;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::Deserialize;
use serde_json::{json, Value};

pub use self::events::{Alert, AlertListener, AlertSeverity, AlertState, Event, EventStore};
pub use self::log::{LogRecord, LogStore, Severity, DEFAULT_CAPACITY};
pub use self::remote::ServicesClient;
pub use self::reservations::{Reservation, ReservationTable};

use crate::conduit::{ConnectionPolicy, ObjectRef};
use crate::error::Result;
use crate::kernel::{args, reply, Configurable, Scope};
use crate::supervisory::{DeliveryPolicy, Outbox, RemoteSink, Update, UpdateBody};

pub const LOG_OBJECT: &str = "__log";
pub const EVENTS_OBJECT: &str = "__events";
pub const RESERVATIONS_OBJECT: &str = "__reservations";

/// Framework-side view of the shared services, local or remote.
pub trait ServiceHub: Send + Sync {
    fn log(&self, process: &str, severity: Severity, text: &str);
    fn emit(&self, name: &str, source: &str, payload: Value);
    fn raise_alert(&self, name: &str, source: &str, payload: Value, severity: AlertSeverity);
    /// Ok iff `token` is the live reservation on `device`; RESERVED otherwise.
    fn check_reservation(&self, device: &str, token: Option<&str>) -> Result<()>;
}

/// The in-process stores.
#[derive(Default)]
pub struct Services {
    pub log: LogStore,
    pub events: EventStore,
    pub reservations: ReservationTable,
}

impl Services {
    pub fn new(log: LogStore, events: EventStore, reservations: ReservationTable) -> Self {
        Services {
            log,
            events,
            reservations,
        }
    }
}

impl ServiceHub for Services {
    fn log(&self, process: &str, severity: Severity, text: &str) {
        self.log.append(process, severity, text);
    }

    fn emit(&self, name: &str, source: &str, payload: Value) {
        self.events.emit(name, source, payload);
    }

    fn raise_alert(&self, name: &str, source: &str, payload: Value, severity: AlertSeverity) {
        self.events.raise_alert(name, source, payload, severity);
    }

    fn check_reservation(&self, device: &str, token: Option<&str>) -> Result<()> {
        self.reservations.check(device, token)
    }
}

#[derive(Deserialize)]
struct LogArgs {
    process: String,
    severity: Severity,
    text: String,
}

#[derive(Deserialize)]
struct LogQuery {
    #[serde(default = "min_severity")]
    min_severity: Severity,
    #[serde(default)]
    after: u64,
}

fn min_severity() -> Severity {
    Severity::Debug
}

#[derive(Deserialize)]
struct EmitArgs {
    name: String,
    source: String,
    #[serde(default)]
    payload: Value,
}

#[derive(Deserialize)]
struct EventQuery {
    #[serde(default)]
    after: u64,
    #[serde(default)]
    name: Option<String>,
}

#[derive(Deserialize)]
struct RaiseArgs {
    name: String,
    source: String,
    #[serde(default)]
    payload: Value,
    severity: AlertSeverity,
}

#[derive(Deserialize)]
struct AckArgs {
    id: u64,
    operator: String,
}

#[derive(Deserialize)]
struct AlertQuery {
    #[serde(default)]
    state: Option<AlertState>,
}

#[derive(Deserialize)]
struct SubscribeArgs {
    subscriber: ObjectRef,
    #[serde(default)]
    policy: Option<ConnectionPolicy>,
}

#[derive(Deserialize)]
struct IdArg {
    id: u64,
}

#[derive(Deserialize)]
struct ReserveArgs {
    device: String,
    holder: String,
}

#[derive(Deserialize)]
struct TokenArg {
    token: String,
}

#[derive(Deserialize)]
struct CheckArgs {
    device: String,
    #[serde(default)]
    token: Option<String>,
}

pub fn log_object(services: Arc<Services>) -> Configurable {
    let s1 = services.clone();
    let s2 = services;
    Configurable::builder(LOG_OBJECT, "log_service", Scope::Distributed)
        .concurrent("append", move |v| {
            let a: LogArgs = args(v)?;
            reply(s1.log.append(&a.process, a.severity, &a.text))
        })
        .concurrent("query", move |v| {
            let q: LogQuery = args(if v.is_null() { json!({}) } else { v })?;
            reply(s2.log.query(q.min_severity, q.after))
        })
        .build()
}

/// `__events`: event log, alerts, and alert subscriptions for remote Directors.
pub fn events_object(services: Arc<Services>) -> Configurable {
    let s = services;
    let (s1, s2, s3, s4, s5, s6, s7) = (
        s.clone(),
        s.clone(),
        s.clone(),
        s.clone(),
        s.clone(),
        s.clone(),
        s,
    );
    let outboxes: Arc<Mutex<HashMap<u64, Arc<Outbox>>>> = Default::default();
    let outboxes2 = outboxes.clone();
    Configurable::builder(EVENTS_OBJECT, "event_service", Scope::Distributed)
        .concurrent("emit", move |v| {
            let a: EmitArgs = args(v)?;
            reply(s1.events.emit(&a.name, &a.source, a.payload))
        })
        .concurrent("query", move |v| {
            let q: EventQuery = args(if v.is_null() { json!({}) } else { v })?;
            reply(s2.events.query(q.after, q.name.as_deref()))
        })
        .concurrent("raise_alert", move |v| {
            let a: RaiseArgs = args(v)?;
            reply(s3.events.raise_alert(&a.name, &a.source, a.payload, a.severity))
        })
        .concurrent("acknowledge", move |v| {
            let a: AckArgs = args(v)?;
            reply(s4.events.acknowledge(a.id, &a.operator)?)
        })
        .concurrent("alerts", move |v| {
            let q: AlertQuery = args(if v.is_null() { json!({}) } else { v })?;
            reply(s5.events.alerts(q.state))
        })
        .concurrent("subscribe_alerts", move |v| {
            let a: SubscribeArgs = args(v)?;
            let policy = a.policy.unwrap_or_default();
            let sink = Arc::new(RemoteSink::new(&a.subscriber, &policy)?);
            // The listener id is only known after subscribing; the hooks read it from here.
            let id_cell: Arc<Mutex<u64>> = Default::default();
            let (events, cell) = (s6.clone(), id_cell.clone());
            let outbox = Arc::new(Outbox::spawn(
                &format!("alerts->{}", a.subscriber),
                sink,
                DeliveryPolicy::from_connection(&policy),
                Box::new(move |e| {
                    ::log::warn!("alert subscriber dropped: {e}");
                    let _ = events.events.unsubscribe_alerts(*cell.lock());
                }),
            ));
            let seq = AtomicU64::new(0);
            let (ob, cell) = (outbox.clone(), id_cell.clone());
            let id = s6.events.subscribe_alerts(Arc::new(move |alert: &Alert| {
                ob.push(Update {
                    publisher: EVENTS_OBJECT.into(),
                    mapper: "alerts".into(),
                    subscription: *cell.lock(),
                    seq: seq.fetch_add(1, Ordering::SeqCst) + 1,
                    body: UpdateBody::Alert(alert.clone()),
                });
            }));
            *id_cell.lock() = id;
            outboxes.lock().insert(id, outbox);
            reply(id)
        })
        .concurrent("unsubscribe_alerts", move |v| {
            let a: IdArg = args(v)?;
            s7.events.unsubscribe_alerts(a.id)?;
            if let Some(o) = outboxes2.lock().remove(&a.id) {
                o.close();
            }
            Ok(Value::Null)
        })
        .build()
}

pub fn reservations_object(services: Arc<Services>) -> Configurable {
    let (s1, s2, s3, s4) = (services.clone(), services.clone(), services.clone(), services);
    Configurable::builder(RESERVATIONS_OBJECT, "reservation_service", Scope::Distributed)
        .concurrent("reserve", move |v| {
            let a: ReserveArgs = args(v)?;
            reply(s1.reservations.reserve(&a.device, &a.holder)?)
        })
        .concurrent("release", move |v| {
            let a: TokenArg = args(v)?;
            s2.reservations.release(&a.token)?;
            Ok(Value::Null)
        })
        .concurrent("check", move |v| {
            let a: CheckArgs = args(v)?;
            s3.reservations.check(&a.device, a.token.as_deref())?;
            Ok(Value::Null)
        })
        .concurrent("list", move |_| reply(s4.reservations.list()))
        .build()
}
