//! Beam shutter: a local drive with a transit time, fronted by a
//! distributed device.

use std::sync::{Arc, Weak};
use std::time::Duration;

use iccs_core::kernel::{args, BuildContext, Configurable, Scope};
use iccs_core::registry::ObjectSpec;
use iccs_core::services::ServiceHub;
use iccs_core::statusmon::{with_monitor_methods, MonitorHub, Sampler};
use iccs_core::{Error, FieldValue, Result};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::sim::{self, Deferred, SimClock, Ticked};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShutterState {
    Open,
    Closed,
    Transit,
}

impl ShutterState {
    pub fn as_str(self) -> &'static str {
        match self {
            ShutterState::Open => "open",
            ShutterState::Closed => "closed",
            ShutterState::Transit => "transit",
        }
    }
}

struct Drive {
    state: ShutterState,
    /// Destination and time left while in transit.
    transit: Option<(ShutterState, Duration)>,
}

pub struct ShutterDrive {
    transit_time: Duration,
    inner: Mutex<Drive>,
}

impl ShutterDrive {
    pub fn new(initial: ShutterState, transit_time: Duration) -> Result<Arc<ShutterDrive>> {
        if initial == ShutterState::Transit {
            return Err(Error::bad_args("a shutter cannot start in transit"));
        }
        Ok(Arc::new(ShutterDrive {
            transit_time,
            inner: Mutex::new(Drive {
                state: initial,
                transit: None,
            }),
        }))
    }

    pub fn state(&self) -> ShutterState {
        self.inner.lock().state
    }

    pub fn is_open(&self) -> bool {
        self.state() == ShutterState::Open
    }

    /// Starts moving to `to`. Rejected while in transit; a no-op if
    /// already there.
    pub fn command(&self, to: ShutterState) -> Result<()> {
        let mut d = self.inner.lock();
        match d.state {
            ShutterState::Transit => Err(Error::app("shutter is in transit")),
            s if s == to => Ok(()),
            _ if self.transit_time.is_zero() => {
                d.state = to;
                Ok(())
            }
            _ => {
                d.state = ShutterState::Transit;
                d.transit = Some((to, self.transit_time));
                Ok(())
            }
        }
    }
}

impl Ticked for ShutterDrive {
    fn tick(&self, dt: Duration) -> Option<Deferred> {
        let mut d = self.inner.lock();
        if let Some((to, left)) = d.transit {
            if left <= dt {
                d.state = to;
                d.transit = None;
            } else {
                d.transit = Some((to, left - dt));
            }
        }
        None
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DriveParams {
    #[serde(default = "closed")]
    initial: ShutterState,
    #[serde(default = "default_transit")]
    transit_ms: u64,
}

fn closed() -> ShutterState {
    ShutterState::Closed
}

fn default_transit() -> u64 {
    100
}

/// Constructor for the `shutter_drive` local type.
pub fn drive_object(spec: &ObjectSpec, ctx: &mut BuildContext) -> Result<Configurable> {
    let p: DriveParams = args(if spec.params.is_null() { json!({}) } else { spec.params.clone() })?;
    let drive = ShutterDrive::new(p.initial, Duration::from_millis(p.transit_ms))?;
    sim::clock(ctx).attach(Arc::downgrade(&drive) as Weak<dyn Ticked>);
    Ok(Configurable::builder(&spec.name, &spec.type_tag, Scope::Local)
        .instance(drive)
        .build())
}

#[derive(Deserialize)]
struct TokenArgs {
    #[serde(default)]
    token: Option<String>,
}

pub struct Shutter {
    name: String,
    drive: Arc<ShutterDrive>,
    clock: Arc<SimClock>,
    hub: Option<Arc<dyn ServiceHub>>,
}

impl Shutter {
    pub fn drive(&self) -> &Arc<ShutterDrive> {
        &self.drive
    }

    fn command(&self, to: ShutterState, v: Value) -> Result<Value> {
        let t: TokenArgs = args(if v.is_null() { json!({}) } else { v })?;
        if let Some(h) = &self.hub {
            h.check_reservation(&self.name, t.token.as_deref())?;
        }
        let _hold = self.clock.hold();
        self.drive.command(to)?;
        Ok(json!({"state": self.drive.state()}))
    }
}

/// Constructor for the `shutter` distributed type; binds one `shutter_drive`.
pub fn shutter_object(spec: &ObjectSpec, ctx: &mut BuildContext) -> Result<Configurable> {
    let bound = spec.controller_bindings();
    let [drive] = bound.as_slice() else {
        return Err(Error::bad_args(format!("shutter {} needs exactly one drive", spec.name)));
    };
    let drive = ctx.local::<ShutterDrive>(drive)?;
    let hub = ctx.framework().ok().map(|f| f.hub());
    let sinks = ctx.framework()?.sinks.clone();
    let shutter = Arc::new(Shutter {
        name: spec.name.clone(),
        drive: drive.clone(),
        clock: sim::clock(ctx),
        hub,
    });
    let d = drive.clone();
    let sampler: Sampler = Arc::new(move |f: &str| (f == "state").then(|| FieldValue::Text(d.state().as_str().into())));
    let monitors = MonitorHub::new(&spec.name, sampler, sinks);
    let (s1, s2) = (shutter.clone(), shutter.clone());
    Ok(
        with_monitor_methods(Configurable::builder(&spec.name, &spec.type_tag, Scope::Distributed), monitors)
            .method("open", move |v| s1.command(ShutterState::Open, v))
            .method("close", move |v| s2.command(ShutterState::Closed, v))
            .method("state", move |_| Ok(json!(drive.state())))
            .instance(shutter)
            .build(),
    )
}
