use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::log::DEFAULT_CAPACITY;
use crate::error::{Error, Result};
use crate::registry::now_ms;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub timestamp: u64,
    pub name: String,
    pub source: String,
    #[serde(default)]
    pub payload: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlertSeverity {
    Warning,
    Critical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlertState {
    Raised,
    Acknowledged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub id: u64,
    pub event: Event,
    pub severity: AlertSeverity,
    pub state: AlertState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acked_by: Option<String>,
}

pub type AlertListener = Arc<dyn Fn(&Alert) + Send + Sync>;

struct Inner {
    next_seq: u64,
    events: VecDeque<Event>,
    next_alert: u64,
    alerts: BTreeMap<u64, Alert>,
}

/// Event log plus alert book-keeping. Raising an alert appends its event;
/// every raise and acknowledgement is pushed to all alert listeners.
pub struct EventStore {
    capacity: usize,
    inner: Mutex<Inner>,
    listeners: Mutex<Vec<(u64, AlertListener)>>,
    next_listener: AtomicU64,
    // Serializes listener notification so each listener sees changes in order.
    notify: Mutex<()>,
}

impl Default for EventStore {
    fn default() -> Self {
        Self::new(DEFAULT_CAPACITY)
    }
}

impl EventStore {
    pub fn new(capacity: usize) -> Self {
        EventStore {
            capacity: capacity.max(1),
            inner: Mutex::new(Inner {
                next_seq: 1,
                events: VecDeque::new(),
                next_alert: 1,
                alerts: BTreeMap::new(),
            }),
            listeners: Mutex::new(Vec::new()),
            next_listener: AtomicU64::new(1),
            notify: Mutex::new(()),
        }
    }

    fn push_event(&self, inner: &mut Inner, name: &str, source: &str, payload: Value) -> Event {
        let ev = Event {
            seq: inner.next_seq,
            timestamp: now_ms(),
            name: name.to_string(),
            source: source.to_string(),
            payload,
        };
        inner.next_seq += 1;
        if inner.events.len() == self.capacity {
            inner.events.pop_front();
        }
        inner.events.push_back(ev.clone());
        ev
    }

    pub fn emit(&self, name: &str, source: &str, payload: Value) -> u64 {
        let mut inner = self.inner.lock();
        self.push_event(&mut inner, name, source, payload).seq
    }

    /// Events with seq greater than `after`, optionally filtered by name.
    pub fn query(&self, after: u64, name: Option<&str>) -> Vec<Event> {
        self.inner
            .lock()
            .events
            .iter()
            .filter(|e| e.seq > after && name.is_none_or(|n| e.name == n))
            .cloned()
            .collect()
    }

    pub fn raise_alert(&self, name: &str, source: &str, payload: Value, severity: AlertSeverity) -> u64 {
        let _order = self.notify.lock();
        let alert = {
            let mut inner = self.inner.lock();
            let event = self.push_event(&mut inner, name, source, payload);
            let id = inner.next_alert;
            inner.next_alert += 1;
            let alert = Alert {
                id,
                event,
                severity,
                state: AlertState::Raised,
                acked_by: None,
            };
            inner.alerts.insert(id, alert.clone());
            alert
        };
        self.fan_out(&alert);
        alert.id
    }

    pub fn acknowledge(&self, id: u64, operator: &str) -> Result<Alert> {
        let _order = self.notify.lock();
        let alert = {
            let mut inner = self.inner.lock();
            let a = inner
                .alerts
                .get_mut(&id)
                .ok_or_else(|| Error::no_such_object(format!("no alert {id}")))?;
            if a.state == AlertState::Acknowledged {
                return Err(Error::bad_args(format!(
                    "alert {id} already acknowledged by {}",
                    a.acked_by.as_deref().unwrap_or("?")
                )));
            }
            a.state = AlertState::Acknowledged;
            a.acked_by = Some(operator.to_string());
            a.clone()
        };
        self.fan_out(&alert);
        Ok(alert)
    }

    pub fn alert(&self, id: u64) -> Option<Alert> {
        self.inner.lock().alerts.get(&id).cloned()
    }

    pub fn alerts(&self, state: Option<AlertState>) -> Vec<Alert> {
        self.inner
            .lock()
            .alerts
            .values()
            .filter(|a| state.is_none_or(|s| a.state == s))
            .cloned()
            .collect()
    }

    pub fn subscribe_alerts(&self, listener: AlertListener) -> u64 {
        let id = self.next_listener.fetch_add(1, Ordering::SeqCst);
        self.listeners.lock().push((id, listener));
        id
    }

    pub fn unsubscribe_alerts(&self, id: u64) -> Result<()> {
        let mut l = self.listeners.lock();
        let before = l.len();
        l.retain(|(i, _)| *i != id);
        if l.len() == before {
            return Err(Error::no_such_object(format!("no alert subscription {id}")));
        }
        Ok(())
    }

    fn fan_out(&self, alert: &Alert) {
        let listeners: Vec<AlertListener> = self.listeners.lock().iter().map(|(_, l)| l.clone()).collect();
        for l in listeners {
            l(alert);
        }
    }
}
