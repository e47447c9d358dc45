use serde::{Deserialize, Serialize};

use crate::conduit::ObjectRef;
use crate::registry::{Category, FacilityConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProcState {
    Pending,
    Starting,
    Ready,
    Failed,
    Stopped,
}

impl ProcState {
    pub fn as_str(self) -> &'static str {
        match self {
            ProcState::Pending => "pending",
            ProcState::Starting => "starting",
            ProcState::Ready => "ready",
            ProcState::Failed => "failed",
            ProcState::Stopped => "stopped",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, ProcState::Failed | ProcState::Stopped)
    }
}

/// Transitions a report may make. `ready -> ready` is a heartbeat and
/// `starting -> starting` a repeated boot report; leaving a terminal state
/// needs a relaunch, which resets the record to pending.
pub fn legal(from: ProcState, to: ProcState) -> bool {
    use ProcState::*;
    match (from, to) {
        (Pending, Starting) | (Starting, Starting) | (Starting, Ready) | (Ready, Ready) => true,
        (Pending | Starting | Ready, Failed | Stopped) => true,
        _ => false,
    }
}

/// A process's self-report to the system manager.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub process: String,
    pub state: ProcState,
    /// The process's `__process` control object.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<ObjectRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pid: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessRecord {
    pub name: String,
    pub category: Category,
    pub state: ProcState,
    /// Milliseconds since the epoch of the last ready report.
    pub last_heartbeat: Option<u64>,
    pub pid: Option<u32>,
    pub control: Option<ObjectRef>,
    /// Why the process failed, if it did.
    pub reason: Option<String>,
    pub launches: u32,
}

impl ProcessRecord {
    pub fn new(name: &str, category: Category) -> Self {
        ProcessRecord {
            name: name.to_string(),
            category,
            state: ProcState::Pending,
            last_heartbeat: None,
            pid: None,
            control: None,
            reason: None,
            launches: 0,
        }
    }
}

/// Start-up phases: FEPs, then supervisors, then gateways. Always three.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StartPlan {
    pub phases: Vec<Vec<String>>,
}

pub const PHASE_ORDER: [Category; 3] = [Category::Fep, Category::Supervisor, Category::Gateway];

pub fn plan(config: &FacilityConfig) -> StartPlan {
    StartPlan {
        phases: PHASE_ORDER
            .iter()
            .map(|c| {
                config
                    .processes
                    .iter()
                    .filter(|p| p.category == *c)
                    .map(|p| p.name.clone())
                    .collect()
            })
            .collect(),
    }
}
