use std::collections::BTreeMap;
use std::sync::{Arc, Weak};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::director::{Entry, Record, Update, UpdateBody};
use super::outbox::{DeliveryPolicy, Outbox, SinkFactory};
use crate::conduit::ObjectRef;
use crate::error::{Error, Result};
use crate::kernel::{args, reply, ConfigurableBuilder};
use crate::services::{AlertSeverity, ServiceHub};

type Projection<S> = Box<dyn Fn(&S) -> Vec<Entry> + Send + Sync>;

/// A named, pure projection of an LCU's private state into a record.
pub struct DataMapper<S> {
    name: String,
    projection: Projection<S>,
}

impl<S> DataMapper<S> {
    pub fn new<F>(name: &str, projection: F) -> Self
    where
        F: Fn(&S) -> Vec<Entry> + Send + Sync + 'static,
    {
        DataMapper {
            name: name.to_string(),
            projection: Box::new(projection),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn project(&self, state: &S) -> Vec<Entry> {
        (self.projection)(state)
    }
}

struct Subscription {
    mapper: String,
    subscriber: ObjectRef,
    outbox: Outbox,
}

struct Inner<S> {
    state: S,
    mappers: Vec<DataMapper<S>>,
    last: BTreeMap<String, Record>,
    subs: BTreeMap<u64, Subscription>,
    next_sub: u64,
}

/// One publication produced by [`Lcu::evolve`].
#[derive(Debug, Clone, PartialEq)]
pub struct Publication {
    pub mapper: String,
    pub record: Record,
    pub recipients: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubscriptionStatus {
    pub id: u64,
    pub mapper: String,
    pub subscriber: ObjectRef,
    pub delivered: u64,
    pub pending: usize,
}

/// Logical control unit: private state, data mappers, and subscribers.
///
/// Subscribers only ever see mapper projections. A mapper publishes when
/// its projection of the new state differs from the last record it
/// published; every subscriber first receives a snapshot of the current
/// record.
pub struct Lcu<S> {
    name: String,
    inner: Mutex<Inner<S>>,
    sinks: Arc<dyn SinkFactory>,
    delivery: DeliveryPolicy,
    hub: Option<Arc<dyn ServiceHub>>,
    me: Weak<Lcu<S>>,
}

impl<S: Clone + Send + 'static> Lcu<S> {
    pub fn new(
        name: &str,
        initial: S,
        mappers: Vec<DataMapper<S>>,
        sinks: Arc<dyn SinkFactory>,
        delivery: DeliveryPolicy,
        hub: Option<Arc<dyn ServiceHub>>,
    ) -> Arc<Lcu<S>> {
        let last = mappers
            .iter()
            .map(|m| {
                (
                    m.name.clone(),
                    Record {
                        seq: 1,
                        entries: m.project(&initial),
                    },
                )
            })
            .collect();
        Arc::new_cyclic(|me| Lcu {
            name: name.to_string(),
            inner: Mutex::new(Inner {
                state: initial,
                mappers,
                last,
                subs: BTreeMap::new(),
                next_sub: 1,
            }),
            sinks,
            delivery,
            hub,
            me: me.clone(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn mapper_names(&self) -> Vec<String> {
        self.inner.lock().mappers.iter().map(|m| m.name.clone()).collect()
    }

    /// Last record published by `mapper`.
    pub fn current(&self, mapper: &str) -> Result<Record> {
        self.inner
            .lock()
            .last
            .get(mapper)
            .cloned()
            .ok_or_else(|| Error::no_such_object(format!("{}: no mapper {mapper:?}", self.name)))
    }

    pub fn attach_mapper(&self, mapper: &str, subscriber: &ObjectRef) -> Result<u64> {
        let mut inner = self.inner.lock();
        let snapshot = inner
            .last
            .get(mapper)
            .cloned()
            .ok_or_else(|| Error::no_such_object(format!("{}: no mapper {mapper:?}", self.name)))?;
        let sink = self.sinks.sink_for(subscriber)?;
        let id = inner.next_sub;
        inner.next_sub += 1;
        let me = self.me.clone();
        let who = subscriber.clone();
        let outbox = Outbox::spawn(
            &format!("{}/{mapper}#{id}", self.name),
            sink,
            self.delivery.clone(),
            Box::new(move |e| {
                if let Some(lcu) = me.upgrade() {
                    lcu.drop_dead_subscriber(id, &who, &e);
                }
            }),
        );
        outbox.push(Update {
            publisher: self.name.clone(),
            mapper: mapper.to_string(),
            subscription: id,
            seq: snapshot.seq,
            body: UpdateBody::Record(snapshot.entries),
        });
        inner.subs.insert(
            id,
            Subscription {
                mapper: mapper.to_string(),
                subscriber: subscriber.clone(),
                outbox,
            },
        );
        Ok(id)
    }

    pub fn detach(&self, subscription: u64) -> Result<()> {
        let sub = self
            .inner
            .lock()
            .subs
            .remove(&subscription)
            .ok_or_else(|| Error::no_such_object(format!("{}: no subscription {subscription}", self.name)))?;
        sub.outbox.close();
        Ok(())
    }

    /// Detaches every subscription held by `subscriber`.
    pub fn detach_subscriber(&self, subscriber: &ObjectRef) -> usize {
        let mut inner = self.inner.lock();
        let ids: Vec<u64> = inner
            .subs
            .iter()
            .filter(|(_, s)| &s.subscriber == subscriber)
            .map(|(id, _)| *id)
            .collect();
        for id in &ids {
            if let Some(s) = inner.subs.remove(id) {
                s.outbox.close();
            }
        }
        ids.len()
    }

    /// Applies `delta` to a copy of the state and commits it if accepted,
    /// then publishes on every mapper whose projection changed.
    pub fn evolve<F>(&self, delta: F) -> Result<Vec<Publication>>
    where
        F: FnOnce(&mut S) -> Result<()>,
    {
        let mut inner = self.inner.lock();
        let mut next = inner.state.clone();
        delta(&mut next).map_err(|e| match e.code {
            crate::error::ErrorCode::AppError => e,
            _ => Error::app(e.message),
        })?;
        inner.state = next;
        let mut out = Vec::new();
        let Inner {
            state,
            mappers,
            last,
            subs,
            ..
        } = &mut *inner;
        for m in mappers.iter() {
            let entries = m.project(state);
            let prev = last.get_mut(&m.name).expect("every mapper has a last record");
            if prev.entries == entries {
                continue;
            }
            prev.seq += 1;
            prev.entries = entries;
            let record = prev.clone();
            let mut recipients = 0;
            for (id, s) in subs.iter().filter(|(_, s)| s.mapper == m.name) {
                if s.outbox.push(Update {
                    publisher: self.name.clone(),
                    mapper: m.name.clone(),
                    subscription: *id,
                    seq: record.seq,
                    body: UpdateBody::Record(record.entries.clone()),
                }) {
                    recipients += 1;
                }
            }
            out.push(Publication {
                mapper: m.name.clone(),
                record,
                recipients,
            });
        }
        Ok(out)
    }

    /// Read access for the LCU's own logic. Never exported as a method.
    pub fn inspect<R>(&self, f: impl FnOnce(&S) -> R) -> R {
        f(&self.inner.lock().state)
    }

    pub fn subscriptions(&self) -> Vec<SubscriptionStatus> {
        self.inner
            .lock()
            .subs
            .iter()
            .map(|(id, s)| SubscriptionStatus {
                id: *id,
                mapper: s.mapper.clone(),
                subscriber: s.subscriber.clone(),
                delivered: s.outbox.delivered(),
                pending: s.outbox.pending(),
            })
            .collect()
    }

    fn drop_dead_subscriber(&self, id: u64, subscriber: &ObjectRef, e: &Error) {
        let removed = self.inner.lock().subs.remove(&id).is_some();
        if !removed {
            return;
        }
        log::warn!("{}: detaching subscriber {subscriber} after failed delivery: {e}", self.name);
        if let Some(hub) = &self.hub {
            hub.raise_alert(
                "subscriber_detached",
                &self.name,
                json!({"subscription": id, "subscriber": subscriber, "error": e}),
                AlertSeverity::Warning,
            );
        }
    }
}

#[derive(Deserialize)]
struct AttachArgs {
    mapper: String,
    subscriber: ObjectRef,
}

#[derive(Deserialize)]
struct DetachArgs {
    subscription: u64,
}

/// Adds the distributed LCU methods `attach_mapper` and `detach`.
pub fn with_lcu_methods<S: Clone + Send + 'static>(builder: ConfigurableBuilder, lcu: Arc<Lcu<S>>) -> ConfigurableBuilder {
    let l1 = lcu.clone();
    let l2 = lcu.clone();
    let l3 = lcu;
    builder
        .method("attach_mapper", move |v| {
            let a: AttachArgs = args(v)?;
            reply(json!({ "subscription": l1.attach_mapper(&a.mapper, &a.subscriber)? }))
        })
        .method("detach", move |v| {
            let a: DetachArgs = args(v)?;
            l2.detach(a.subscription)?;
            Ok(Value::Null)
        })
        .concurrent("subscriptions", move |_| reply(l3.subscriptions()))
}
