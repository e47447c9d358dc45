use std::collections::BTreeMap;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

use crate::conduit::ObjectRef;
use crate::error::{Error, Result};

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NameEntry {
    pub object: String,
    #[serde(rename = "ref")]
    pub object_ref: ObjectRef,
    /// Milliseconds since the Unix epoch.
    pub registered_at: u64,
}

/// The name service table: at most one live entry per object name.
#[derive(Default)]
pub struct NameTable {
    entries: Mutex<BTreeMap<String, NameEntry>>,
    changed: Condvar,
}

impl NameTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Replaces any prior entry for `object`.
    pub fn register(&self, object: &str, object_ref: ObjectRef) {
        let entry = NameEntry {
            object: object.to_string(),
            object_ref,
            registered_at: now_ms(),
        };
        self.entries.lock().insert(object.to_string(), entry);
        self.changed.notify_all();
    }

    pub fn resolve(&self, object: &str) -> Result<ObjectRef> {
        self.entries
            .lock()
            .get(object)
            .map(|e| e.object_ref.clone())
            .ok_or_else(|| Error::no_such_object(format!("{object:?} is not registered")))
    }

    /// Blocks until `object` is registered or `timeout` elapses.
    pub fn wait_for(&self, object: &str, timeout: Duration) -> Result<ObjectRef> {
        let deadline = Instant::now() + timeout;
        let mut entries = self.entries.lock();
        loop {
            if let Some(e) = entries.get(object) {
                return Ok(e.object_ref.clone());
            }
            if self.changed.wait_until(&mut entries, deadline).timed_out() {
                return entries
                    .get(object)
                    .map(|e| e.object_ref.clone())
                    .ok_or_else(|| {
                        Error::timeout(format!(
                            "{object:?} not registered within {} ms",
                            timeout.as_millis()
                        ))
                    });
            }
        }
    }

    pub fn unregister(&self, object: &str) -> bool {
        self.entries.lock().remove(object).is_some()
    }

    /// Removes every entry whose reference points into `process`; returns the removed names.
    pub fn remove_process(&self, process: &str) -> Vec<String> {
        let mut entries = self.entries.lock();
        let gone: Vec<String> = entries
            .iter()
            .filter(|(_, e)| e.object_ref.process == process)
            .map(|(k, _)| k.clone())
            .collect();
        for k in &gone {
            entries.remove(k);
        }
        gone
    }

    pub fn entries(&self) -> Vec<NameEntry> {
        self.entries.lock().values().cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::ErrorCode;
    use std::sync::Arc;
    use std::thread;

    fn r(port: u16, obj: &str) -> ObjectRef {
        ObjectRef::new("127.0.0.1", port, "p", obj).unwrap()
    }

    #[test]
    fn register_resolve_replace() {
        let t = NameTable::new();
        assert_eq!(t.resolve("a").unwrap_err().code, ErrorCode::NoSuchObject);
        t.register("a", r(1, "a"));
        assert_eq!(t.resolve("a").unwrap(), r(1, "a"));
        t.register("a", r(2, "a"));
        assert_eq!(t.resolve("a").unwrap(), r(2, "a"));
        assert_eq!(t.entries().len(), 1);
    }

    #[test]
    fn hundred_names_resolve_to_their_own_refs() {
        let t = NameTable::new();
        for i in 1..=100u16 {
            t.register(&format!("obj{i}"), r(i, &format!("obj{i}")));
        }
        for i in 1..=100u16 {
            assert_eq!(t.resolve(&format!("obj{i}")).unwrap().port, i);
        }
    }

    #[test]
    fn wait_for_returns_immediately_when_present() {
        let t = NameTable::new();
        t.register("a", r(1, "a"));
        let start = Instant::now();
        t.wait_for("a", Duration::from_secs(5)).unwrap();
        assert!(start.elapsed() < Duration::from_millis(50));
    }

    #[test]
    fn wait_for_wakes_on_late_registration() {
        let t = Arc::new(NameTable::new());
        let t2 = t.clone();
        let start = Instant::now();
        let h = thread::spawn(move || {
            thread::sleep(Duration::from_millis(200));
            t2.register("late", r(5, "late"));
        });
        let got = t.wait_for("late", Duration::from_secs(5)).unwrap();
        assert!(start.elapsed() >= Duration::from_millis(200));
        assert_eq!(got.port, 5);
        h.join().unwrap();
    }

    #[test]
    fn wait_for_times_out() {
        let t = NameTable::new();
        let start = Instant::now();
        let e = t.wait_for("never", Duration::from_millis(150)).unwrap_err();
        let took = start.elapsed();
        assert_eq!(e.code, ErrorCode::Timeout);
        assert!(took >= Duration::from_millis(150) && took < Duration::from_millis(400), "{took:?}");
    }

    #[test]
    fn remove_process_drops_only_its_names() {
        let t = NameTable::new();
        t.register("a", ObjectRef::new("h", 1, "p1", "a").unwrap());
        t.register("b", ObjectRef::new("h", 2, "p2", "b").unwrap());
        assert_eq!(t.remove_process("p1"), ["a"]);
        assert!(t.resolve("a").is_err());
        assert!(t.resolve("b").is_ok());
    }
}
