//! Status monitoring: device-side pollers with per-subscriber latency and
//! precision that report only significant changes.

mod deadband;
mod hub;

pub use deadband::{filter_sequence, poll_step, significant, MonitorState, ReportReason, Sample, Scalar};
pub use hub::{with_monitor_methods, MonitorHub, MonitorSpec, Sampler, StatusReport, OUTBOX_CAPACITY};
