//! Central system manager: ordered start-up in three phases, readiness
//! tracking, heartbeat and exit monitoring, failure alerts.

mod central;
mod launch;
mod record;

pub use central::{
    Central, SysmanClient, SysmanOptions, FAILED_ALERT, LAUNCH_HALTED_ALERT, STATE_EVENT, SYSMAN_OBJECT,
};
pub use launch::{ChildProcess, CommandLauncher, InProcessLauncher, Launcher, TemplateSource};
pub use record::{legal, plan, ProcState, ProcessRecord, Report, StartPlan, PHASE_ORDER};
