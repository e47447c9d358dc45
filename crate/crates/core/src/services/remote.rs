use std::sync::mpsc::{self, Sender};
use std::thread;

use serde_json::{json, Value};

use super::{
    Alert, AlertSeverity, AlertState, Event, LogRecord, Reservation, ServiceHub, Severity, EVENTS_OBJECT,
    LOG_OBJECT, RESERVATIONS_OBJECT,
};
use crate::conduit::{Client, ConnectionPolicy, ObjectRef, Target};
use crate::error::Result;
use crate::kernel::args;

enum Outgoing {
    Call(&'static str, &'static str, Value),
}

/// Remote access to the shared services. Log, event and alert submissions
/// are sent in order by a background thread and never block the caller.
pub struct ServicesClient {
    log: Client,
    events: Client,
    reservations: Client,
    queue: Sender<Outgoing>,
}

impl ServicesClient {
    /// `sysman` is any reference into the system manager process; the
    /// service objects are addressed at the same endpoint.
    pub fn new(sysman: &ObjectRef, policy: ConnectionPolicy) -> Result<ServicesClient> {
        let mk = |name: &str| -> Result<Client> {
            Client::new(Target::Ref(sysman.with_object(name)?), policy.clone(), None)
        };
        let bg_log = mk(LOG_OBJECT)?;
        let bg_events = mk(EVENTS_OBJECT)?;
        let (tx, rx) = mpsc::channel::<Outgoing>();
        thread::Builder::new()
            .name("services-tx".into())
            .spawn(move || {
                for Outgoing::Call(object, method, args) in rx {
                    let client = if object == LOG_OBJECT { &bg_log } else { &bg_events };
                    if let Err(e) = client.invoke(method, args) {
                        log::debug!("{object}.{method} not delivered: {e}");
                    }
                }
            })
            .map_err(|e| crate::error::Error::app(e.to_string()))?;
        Ok(ServicesClient {
            log: mk(LOG_OBJECT)?,
            events: mk(EVENTS_OBJECT)?,
            reservations: mk(RESERVATIONS_OBJECT)?,
            queue: tx,
        })
    }

    pub fn query_log(&self, min_severity: Severity, after: u64) -> Result<Vec<LogRecord>> {
        args(self.log.invoke("query", json!({"min_severity": min_severity, "after": after}))?)
    }

    pub fn query_events(&self, after: u64, name: Option<&str>) -> Result<Vec<Event>> {
        args(self.events.invoke("query", json!({"after": after, "name": name}))?)
    }

    pub fn alerts(&self, state: Option<AlertState>) -> Result<Vec<Alert>> {
        args(self.events.invoke("alerts", json!({ "state": state }))?)
    }

    pub fn acknowledge(&self, id: u64, operator: &str) -> Result<Alert> {
        args(self.events.invoke("acknowledge", json!({"id": id, "operator": operator}))?)
    }

    pub fn subscribe_alerts(&self, subscriber: &ObjectRef) -> Result<u64> {
        args(self.events.invoke("subscribe_alerts", json!({ "subscriber": subscriber }))?)
    }

    pub fn reserve(&self, device: &str, holder: &str) -> Result<Reservation> {
        args(self.reservations.invoke("reserve", json!({"device": device, "holder": holder}))?)
    }

    pub fn release(&self, token: &str) -> Result<()> {
        self.reservations
            .invoke("release", json!({ "token": token }))
            .map(|_| ())
    }

    /// Synchronous event emission, for callers that need it ordered before a reply.
    pub fn emit_now(&self, name: &str, source: &str, payload: Value) -> Result<u64> {
        args(self.events.invoke("emit", json!({"name": name, "source": source, "payload": payload}))?)
    }

    fn enqueue(&self, object: &'static str, method: &'static str, args: Value) {
        let _ = self.queue.send(Outgoing::Call(object, method, args));
    }
}

impl ServiceHub for ServicesClient {
    fn log(&self, process: &str, severity: Severity, text: &str) {
        self.enqueue(
            LOG_OBJECT,
            "append",
            json!({"process": process, "severity": severity, "text": text}),
        );
    }

    fn emit(&self, name: &str, source: &str, payload: Value) {
        self.enqueue(
            EVENTS_OBJECT,
            "emit",
            json!({"name": name, "source": source, "payload": payload}),
        );
    }

    fn raise_alert(&self, name: &str, source: &str, payload: Value, severity: AlertSeverity) {
        self.enqueue(
            EVENTS_OBJECT,
            "raise_alert",
            json!({"name": name, "source": source, "payload": payload, "severity": severity}),
        );
    }

    fn check_reservation(&self, device: &str, token: Option<&str>) -> Result<()> {
        self.reservations
            .invoke("check", json!({"device": device, "token": token}))
            .map(|_| ())
    }
}
