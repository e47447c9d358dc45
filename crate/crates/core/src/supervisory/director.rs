use std::collections::HashMap;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::kernel::{args, ConfigurableBuilder};
use crate::services::Alert;
use crate::statusmon::StatusReport;
use crate::value::FieldValue;

/// One ordered (key, value) pair of a published record.
pub type Entry = (String, FieldValue);

/// A record as produced by a data mapper.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub seq: u64,
    pub entries: Vec<Entry>,
}

impl Record {
    pub fn get(&self, key: &str) -> Option<&FieldValue> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }
}

/// What a publisher delivers to a subscriber.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateBody {
    Record(Vec<Entry>),
    Report(StatusReport),
    Alert(Alert),
}

/// Argument of every Director's `update` method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Update {
    pub publisher: String,
    pub mapper: String,
    /// The publisher-assigned id of the subscription this delivery belongs to.
    pub subscription: u64,
    pub seq: u64,
    #[serde(flatten)]
    pub body: UpdateBody,
}

impl Update {
    pub fn record(&self) -> Option<Record> {
        match &self.body {
            UpdateBody::Record(entries) => Some(Record {
                seq: self.seq,
                entries: entries.clone(),
            }),
            _ => None,
        }
    }

    pub fn report(&self) -> Option<&StatusReport> {
        match &self.body {
            UpdateBody::Report(r) => Some(r),
            _ => None,
        }
    }
}

/// The subscriber role: anything with an `update` method.
pub trait Director: Send + Sync {
    fn update(&self, update: Update) -> Result<()>;
}

/// Filters redelivered updates so a Director handles each
/// (publisher, mapper, subscription, seq) at most once.
#[derive(Default)]
pub struct Redelivery {
    last: Mutex<HashMap<(String, String, u64), u64>>,
}

impl Redelivery {
    pub fn new() -> Self {
        Self::default()
    }

    /// True if this update has not been seen before.
    pub fn admit(&self, u: &Update) -> bool {
        let mut last = self.last.lock();
        let key = (u.publisher.clone(), u.mapper.clone(), u.subscription);
        match last.get(&key) {
            Some(&seen) if u.seq <= seen => false,
            _ => {
                last.insert(key, u.seq);
                true
            }
        }
    }

    pub fn forget(&self, publisher: &str, subscription: u64) {
        self.last
            .lock()
            .retain(|(p, _, s), _| !(p == publisher && *s == subscription));
    }
}

/// Adds the `update` method, running concurrently with the object's other calls.
pub fn with_update_method<D: Director + 'static>(
    builder: ConfigurableBuilder,
    director: std::sync::Arc<D>,
) -> ConfigurableBuilder {
    builder.concurrent("update", move |v| {
        let u: Update = args(v)?;
        director.update(u)?;
        Ok(serde_json::Value::Null)
    })
}
