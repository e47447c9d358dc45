use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::thread;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::deadband::{poll_step, MonitorState, ReportReason, Sample};
use crate::conduit::ObjectRef;
use crate::error::{Error, Result};
use crate::kernel::{args, reply, ConfigurableBuilder};
use crate::registry::now_ms;
use crate::supervisory::{DeliveryPolicy, Outbox, SinkFactory, Update, UpdateBody};
use crate::value::FieldValue;

/// Default bound of a monitor's report queue; the oldest report is dropped on overflow.
pub const OUTBOX_CAPACITY: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusReport {
    pub device: String,
    pub field: String,
    pub value: FieldValue,
    pub timestamp: u64,
    pub reason: ReportReason,
}

/// A subscriber's monitoring contract for one field of one device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorSpec {
    pub field: String,
    /// Absolute deadband in the field's units.
    pub precision: f64,
    /// Poll period, and so the bound on report delay.
    pub latency_ms: u64,
    pub subscriber: ObjectRef,
}

impl MonitorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.precision >= 0.0) || !self.precision.is_finite() {
            return Err(Error::bad_args("precision must be a finite number >= 0"));
        }
        if self.latency_ms == 0 {
            return Err(Error::bad_args("latency must be positive"));
        }
        Ok(())
    }
}

/// Reads the current value of a named field, `None` if the device has no such field.
pub type Sampler = Arc<dyn Fn(&str) -> Option<FieldValue> + Send + Sync>;

fn to_sample(v: &FieldValue) -> Sample<f64> {
    match v {
        FieldValue::Number(n) => Sample::Number(*n),
        FieldValue::Text(s) => Sample::Text(s.clone()),
        FieldValue::Bool(b) => Sample::Bool(*b),
    }
}

#[derive(Default)]
struct Stop {
    stopped: Mutex<bool>,
    cv: Condvar,
}

impl Stop {
    fn set(&self) {
        *self.stopped.lock() = true;
        self.cv.notify_all();
    }

    /// Sleeps up to `d`; true if stopped.
    fn wait(&self, d: Duration) -> bool {
        let mut s = self.stopped.lock();
        if !*s {
            self.cv.wait_for(&mut s, d);
        }
        *s
    }

    fn is_set(&self) -> bool {
        *self.stopped.lock()
    }
}

struct Monitor {
    spec: MonitorSpec,
    stop: Arc<Stop>,
    outbox: Arc<Outbox>,
}

/// Device-side status monitor framework: one poller per monitor, sampling
/// inside the device's process and reporting significant changes.
pub struct MonitorHub {
    device: String,
    sampler: Sampler,
    sinks: Arc<dyn SinkFactory>,
    delivery: DeliveryPolicy,
    monitors: Mutex<BTreeMap<u64, Monitor>>,
    next_id: AtomicU64,
    samples: AtomicU64,
    reports: AtomicU64,
    me: Weak<MonitorHub>,
}

impl MonitorHub {
    pub fn new(device: &str, sampler: Sampler, sinks: Arc<dyn SinkFactory>) -> Arc<MonitorHub> {
        Self::with_delivery(
            device,
            sampler,
            sinks,
            DeliveryPolicy {
                max_attempts: 3,
                retry_backoff_ms: 20,
                capacity: Some(OUTBOX_CAPACITY),
            },
        )
    }

    pub fn with_delivery(
        device: &str,
        sampler: Sampler,
        sinks: Arc<dyn SinkFactory>,
        delivery: DeliveryPolicy,
    ) -> Arc<MonitorHub> {
        Arc::new_cyclic(|me| MonitorHub {
            device: device.to_string(),
            sampler,
            sinks,
            delivery,
            monitors: Mutex::new(BTreeMap::new()),
            next_id: AtomicU64::new(1),
            samples: AtomicU64::new(0),
            reports: AtomicU64::new(0),
            me: me.clone(),
        })
    }

    pub fn device(&self) -> &str {
        &self.device
    }

    /// Total field samples taken by all pollers.
    pub fn samples_taken(&self) -> u64 {
        self.samples.load(Ordering::SeqCst)
    }

    pub fn reports_sent(&self) -> u64 {
        self.reports.load(Ordering::SeqCst)
    }

    pub fn active(&self) -> Vec<(u64, MonitorSpec)> {
        self.monitors
            .lock()
            .iter()
            .map(|(id, m)| (*id, m.spec.clone()))
            .collect()
    }

    fn sample(&self, field: &str) -> Option<FieldValue> {
        self.samples.fetch_add(1, Ordering::SeqCst);
        (self.sampler)(field)
    }

    /// Starts a monitor: an initial report is queued immediately, then the
    /// field is sampled every `latency_ms`. Replaces an existing monitor of
    /// the same field for the same subscriber.
    pub fn begin(&self, spec: MonitorSpec) -> Result<u64> {
        spec.validate()?;
        let first = self
            .sample(&spec.field)
            .ok_or_else(|| Error::no_such_object(format!("{} has no field {:?}", self.device, spec.field)))?;
        let sink = self.sinks.sink_for(&spec.subscriber)?;

        let mut monitors = self.monitors.lock();
        let replaced: Vec<u64> = monitors
            .iter()
            .filter(|(_, m)| m.spec.field == spec.field && m.spec.subscriber == spec.subscriber)
            .map(|(id, _)| *id)
            .collect();
        for id in replaced {
            if let Some(m) = monitors.remove(&id) {
                m.stop.set();
                m.outbox.close();
            }
        }

        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        let stop = Arc::new(Stop::default());
        let me = self.me.clone();
        let outbox = Arc::new(Outbox::spawn(
            &format!("{}.{}#{id}", self.device, spec.field),
            sink,
            self.delivery.clone(),
            Box::new(move |e| {
                if let Some(hub) = me.upgrade() {
                    log::warn!("{}: monitor {id} subscriber unreachable, ending: {e}", hub.device);
                    let _ = hub.end(id);
                }
            }),
        ));

        let state = MonitorState::new(spec.precision);
        let (state, reason) = poll_step(&state, to_sample(&first));
        let mut seq = 0u64;
        if let Some(reason) = reason {
            seq += 1;
            self.push_report(&outbox, id, seq, &spec.field, first, reason);
        }
        monitors.insert(
            id,
            Monitor {
                spec: spec.clone(),
                stop: stop.clone(),
                outbox: outbox.clone(),
            },
        );
        drop(monitors);

        let me = self.me.clone();
        let latency = Duration::from_millis(spec.latency_ms);
        thread::Builder::new()
            .name(format!("poll {}.{}#{id}", self.device, spec.field))
            .spawn(move || {
                let mut state = state;
                let mut seq = seq;
                while !stop.wait(latency) {
                    let Some(hub) = me.upgrade() else { return };
                    let Some(value) = hub.sample(&spec.field) else {
                        continue;
                    };
                    let (next, reason) = poll_step(&state, to_sample(&value));
                    state = next;
                    if let Some(reason) = reason {
                        if stop.is_set() {
                            return;
                        }
                        seq += 1;
                        hub.push_report(&outbox, id, seq, &spec.field, value, reason);
                    }
                }
            })
            .map_err(|e| Error::app(e.to_string()))?;
        Ok(id)
    }

    fn push_report(&self, outbox: &Outbox, id: u64, seq: u64, field: &str, value: FieldValue, reason: ReportReason) {
        self.reports.fetch_add(1, Ordering::SeqCst);
        outbox.push(Update {
            publisher: self.device.clone(),
            mapper: field.to_string(),
            subscription: id,
            seq,
            body: UpdateBody::Report(StatusReport {
                device: self.device.clone(),
                field: field.to_string(),
                value,
                timestamp: now_ms(),
                reason,
            }),
        });
    }

    /// Stops a monitor; no final report is sent.
    pub fn end(&self, id: u64) -> Result<()> {
        let m = self
            .monitors
            .lock()
            .remove(&id)
            .ok_or_else(|| Error::no_such_object(format!("{}: no monitor {id}", self.device)))?;
        m.stop.set();
        m.outbox.close();
        Ok(())
    }

    pub fn end_all(&self) {
        let all: Vec<_> = std::mem::take(&mut *self.monitors.lock()).into_values().collect();
        for m in all {
            m.stop.set();
            m.outbox.close();
        }
    }
}

impl Drop for MonitorHub {
    fn drop(&mut self) {
        for m in self.monitors.get_mut().values() {
            m.stop.set();
            m.outbox.close();
        }
    }
}

#[derive(Deserialize)]
struct EndArgs {
    monitor: u64,
}

/// Adds `begin_monitoring` and `end_monitoring` to a device.
pub fn with_monitor_methods(builder: ConfigurableBuilder, hub: Arc<MonitorHub>) -> ConfigurableBuilder {
    let h1 = hub.clone();
    let h2 = hub.clone();
    let h3 = hub;
    builder
        .concurrent("begin_monitoring", move |v| {
            let spec: MonitorSpec = args(v)?;
            reply(json!({ "monitor": h1.begin(spec)? }))
        })
        .concurrent("end_monitoring", move |v| {
            let a: EndArgs = args(v)?;
            h2.end(a.monitor)?;
            Ok(Value::Null)
        })
        .concurrent("monitors", move |_| {
            let list: Vec<Value> = h3
                .active()
                .into_iter()
                .map(|(id, spec)| json!({"monitor": id, "spec": spec}))
                .collect();
            Ok(Value::Array(list))
        })
}
