//! Service frameworks for building front-end processors and supervisors.
//!
//! * [`conduit`]: framed messaging, object references, connection recovery
//! * [`registry`]: name service and facility configuration
//! * [`kernel`]: generic process template, factories, FIFO dispatcher
//! * [`sysman`]: ordered start-up and termination monitoring
//! * [`services`]: message log, events and alerts, reservations
//! * [`supervisory`]: directors, LCUs and data mappers
//! * [`statusmon`]: device-side status monitors with deadband filtering

pub mod conduit;
pub mod error;
pub mod kernel;
pub mod registry;
pub mod services;
pub mod statusmon;
pub mod supervisory;
pub mod sysman;
pub mod value;

pub use error::{Error, ErrorCode, Result};
pub use value::FieldValue;

/// Deadband state over double-precision samples.
pub type MonitorStateF64 = statusmon::MonitorState<f64>;
/// Deadband state over single-precision samples.
pub type MonitorStateF32 = statusmon::MonitorState<f32>;
