use std::collections::VecDeque;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::now_ms;

pub const DEFAULT_CAPACITY: usize = 65536;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Debug,
    Info,
    Warning,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    pub seq: u64,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
    pub process: String,
    pub severity: Severity,
    pub text: String,
}

struct Inner {
    next_seq: u64,
    records: VecDeque<LogRecord>,
    file: Option<File>,
}

/// Central message log: a bounded in-memory ring with optional
/// newline-delimited JSON file append.
pub struct LogStore {
    capacity: usize,
    inner: Mutex<Inner>,
}

impl Default for LogStore {
    fn default() -> Self {
        Self::new(DEFAULT_CAPACITY)
    }
}

impl LogStore {
    pub fn new(capacity: usize) -> Self {
        LogStore {
            capacity: capacity.max(1),
            inner: Mutex::new(Inner {
                next_seq: 1,
                records: VecDeque::new(),
                file: None,
            }),
        }
    }

    pub fn with_file(capacity: usize, path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::bad_args(format!("log file {}: {e}", path.display())))?;
        let store = Self::new(capacity);
        store.inner.lock().file = Some(file);
        Ok(store)
    }

    pub fn append(&self, process: &str, severity: Severity, text: &str) -> u64 {
        let mut inner = self.inner.lock();
        let seq = inner.next_seq;
        inner.next_seq += 1;
        let rec = LogRecord {
            seq,
            timestamp: now_ms(),
            process: process.to_string(),
            severity,
            text: text.to_string(),
        };
        if let Some(f) = inner.file.as_mut() {
            let line = serde_json::to_string(&rec).expect("log record serializes");
            if let Err(e) = writeln!(f, "{line}") {
                log::warn!("log file append failed: {e}");
            }
        }
        if inner.records.len() == self.capacity {
            inner.records.pop_front();
        }
        inner.records.push_back(rec);
        seq
    }

    /// Records at or above `min`, with seq greater than `after`, in seq order.
    pub fn query(&self, min: Severity, after: u64) -> Vec<LogRecord> {
        self.inner
            .lock()
            .records
            .iter()
            .filter(|r| r.severity >= min && r.seq > after)
            .cloned()
            .collect()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;
    use std::thread;

    #[test]
    fn seq_increments_by_one() {
        let s = LogStore::default();
        let a = s.append("p", Severity::Info, "a");
        let b = s.append("p", Severity::Info, "b");
        assert_eq!(b, a + 1);
    }

    #[test]
    fn severity_filter_keeps_seq_order() {
        let s = LogStore::default();
        s.append("p", Severity::Debug, "d");
        s.append("p", Severity::Warning, "w1");
        s.append("p", Severity::Info, "i");
        s.append("p", Severity::Error, "e");
        s.append("p", Severity::Warning, "w2");
        let got: Vec<_> = s.query(Severity::Warning, 0).into_iter().map(|r| r.text).collect();
        assert_eq!(got, ["w1", "e", "w2"]);
    }

    #[test]
    fn concurrent_appends_get_consecutive_seqs() {
        let s = Arc::new(LogStore::default());
        let handles: Vec<_> = (0..10)
            .map(|t| {
                let s = s.clone();
                thread::spawn(move || {
                    (0..100)
                        .map(|i| s.append(&format!("p{t}"), Severity::Info, &i.to_string()))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        let mut seqs: Vec<u64> = handles.into_iter().flat_map(|h| h.join().unwrap()).collect();
        seqs.sort_unstable();
        assert_eq!(seqs.len(), 1000);
        assert_eq!(seqs, (1..=1000).collect::<Vec<_>>());
        let stored: Vec<u64> = s.query(Severity::Debug, 0).iter().map(|r| r.seq).collect();
        assert!(stored.windows(2).all(|w| w[1] == w[0] + 1));
    }

    #[test]
    fn ring_drops_oldest() {
        let s = LogStore::new(3);
        for i in 0..5 {
            s.append("p", Severity::Info, &i.to_string());
        }
        let seqs: Vec<u64> = s.query(Severity::Debug, 0).iter().map(|r| r.seq).collect();
        assert_eq!(seqs, [3, 4, 5]);
    }

    #[test]
    fn file_gets_one_json_line_per_record() {
        let dir = std::env::temp_dir().join(format!("iccs-log-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("log.ndjson");
        let _ = std::fs::remove_file(&path);
        let s = LogStore::with_file(8, &path).unwrap();
        s.append("fep", Severity::Warning, "hot");
        s.append("fep", Severity::Info, "ok");
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<LogRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].text, "hot");
        assert_eq!(lines[1].severity, Severity::Info);
    }
}
