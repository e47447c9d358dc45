//! Multi-axis actuator composed over one to four axis controllers.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock, Weak};
use std::time::Duration;

use iccs_core::kernel::{args, reply, BuildContext, Configurable, Scope};
use iccs_core::registry::ObjectSpec;
use iccs_core::services::ServiceHub;
use iccs_core::statusmon::{with_monitor_methods, MonitorHub, Sampler};
use iccs_core::{Error, ErrorCode, FieldValue, Result};
use parking_lot::Mutex;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::axis::AxisCell;
use crate::sim::{self, Deferred, SimClock, Ticked};

pub const ACTUATOR_TYPE: &str = "actuator";
/// Event emitted when every axis of a move has settled.
pub const MOVE_COMPLETE: &str = "move_complete";
pub const MAX_AXES: usize = 4;

pub struct Actuator {
    name: String,
    axes: Vec<Arc<AxisCell>>,
    clock: Arc<SimClock>,
    hub: Option<Arc<dyn ServiceHub>>,
    moves: AtomicU64,
    completed: AtomicU64,
    /// Move id awaiting settlement.
    pending: Mutex<Option<u64>>,
    monitors: OnceLock<Arc<MonitorHub>>,
}

#[derive(Deserialize)]
struct MoveArgs {
    targets: Vec<f64>,
    #[serde(default)]
    token: Option<String>,
}

#[derive(Deserialize)]
struct JogArgs {
    axis: usize,
    delta: f64,
    #[serde(default)]
    token: Option<String>,
}

#[derive(Deserialize)]
struct TokenArgs {
    #[serde(default)]
    token: Option<String>,
}

impl Actuator {
    pub fn new(
        name: &str,
        axes: Vec<Arc<AxisCell>>,
        clock: Arc<SimClock>,
        hub: Option<Arc<dyn ServiceHub>>,
    ) -> Result<Arc<Actuator>> {
        if axes.is_empty() || axes.len() > MAX_AXES {
            return Err(Error::bad_args(format!(
                "actuator {name} needs 1 to {MAX_AXES} axes, got {}",
                axes.len()
            )));
        }
        let a = Arc::new(Actuator {
            name: name.to_string(),
            axes,
            clock: clock.clone(),
            hub,
            moves: AtomicU64::new(0),
            completed: AtomicU64::new(0),
            pending: Mutex::new(None),
            monitors: OnceLock::new(),
        });
        clock.attach(Arc::downgrade(&a) as Weak<dyn Ticked>);
        Ok(a)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn axes(&self) -> &[Arc<AxisCell>] {
        &self.axes
    }

    pub fn positions(&self) -> Vec<f64> {
        let _hold = self.clock.hold();
        self.axes.iter().map(|a| a.position()).collect()
    }

    pub fn moving(&self) -> bool {
        let _hold = self.clock.hold();
        self.axes.iter().any(|a| a.snapshot().moving())
    }

    /// The device's status monitors, once hosted.
    pub fn monitors(&self) -> Option<&Arc<MonitorHub>> {
        self.monitors.get()
    }

    pub fn completed(&self) -> u64 {
        self.completed.load(Ordering::SeqCst)
    }

    fn check(&self, token: Option<&str>) -> Result<()> {
        match &self.hub {
            Some(h) => h.check_reservation(&self.name, token),
            None => Ok(()),
        }
    }

    /// All-or-nothing: every target is validated before any axis moves.
    pub fn move_to(&self, targets: &[f64], token: Option<&str>) -> Result<u64> {
        self.check(token)?;
        if targets.len() != self.axes.len() {
            return Err(Error::bad_args(format!(
                "{} has {} axes, got {} targets",
                self.name,
                self.axes.len(),
                targets.len()
            )));
        }
        let _hold = self.clock.hold();
        for (i, (a, t)) in self.axes.iter().zip(targets).enumerate() {
            if !t.is_finite() || !a.snapshot().within_limits(*t) {
                let (lo, hi) = a.snapshot().limits();
                return Err(Error::new(
                    ErrorCode::OutOfRange,
                    format!("{} axis {i}: target {t} outside [{lo}, {hi}]", self.name),
                ));
            }
        }
        for (a, t) in self.axes.iter().zip(targets) {
            a.command(*t)?;
        }
        let id = self.moves.fetch_add(1, Ordering::SeqCst) + 1;
        *self.pending.lock() = Some(id);
        Ok(id)
    }

    pub fn jog(&self, axis: usize, delta: f64, token: Option<&str>) -> Result<u64> {
        let mut targets: Vec<f64> = {
            let _hold = self.clock.hold();
            self.axes.iter().map(|a| a.snapshot().target()).collect()
        };
        let t = targets
            .get_mut(axis)
            .ok_or_else(|| Error::bad_args(format!("{} has no axis {axis}", self.name)))?;
        *t += delta;
        self.move_to(&targets, token)
    }

    pub fn stop(&self, token: Option<&str>) -> Result<u64> {
        let here = self.positions();
        self.move_to(&here, token)
    }

    fn field(&self, field: &str) -> Option<FieldValue> {
        match field {
            "positions" => Some(FieldValue::Text(serde_json::to_string(&self.positions()).ok()?)),
            "moving" => Some(FieldValue::Bool(self.moving())),
            "moves" => Some(FieldValue::Number(self.completed() as f64)),
            _ => {
                let i: usize = field.strip_prefix("position_")?.parse().ok()?;
                Some(FieldValue::Number(self.axes.get(i)?.position()))
            }
        }
    }

    pub fn status(&self) -> Value {
        let _hold = self.clock.hold();
        let snaps: Vec<_> = self.axes.iter().map(|a| a.snapshot()).collect();
        json!({
            "positions": snaps.iter().map(|s| s.position()).collect::<Vec<_>>(),
            "targets": snaps.iter().map(|s| s.target()).collect::<Vec<_>>(),
            "moving": snaps.iter().any(|s| s.moving()),
            "limits": snaps.iter().map(|s| [s.limits().0, s.limits().1]).collect::<Vec<_>>(),
            "moves": self.completed(),
        })
    }
}

impl Ticked for Actuator {
    // Axes are attached first, so they have already stepped this tick.
    fn tick(&self, _: Duration) -> Option<Deferred> {
        let mut pending = self.pending.lock();
        let id = (*pending)?;
        if self.axes.iter().any(|a| a.snapshot().moving()) {
            return None;
        }
        *pending = None;
        self.completed.fetch_add(1, Ordering::SeqCst);
        let positions: Vec<f64> = self.axes.iter().map(|a| a.position()).collect();
        let hub = self.hub.clone()?;
        let name = self.name.clone();
        Some(Box::new(move || {
            hub.emit(MOVE_COMPLETE, &name, json!({"move": id, "positions": positions}));
        }))
    }
}

/// Constructor for the `actuator` distributed type. Axis controllers are
/// bound through `params.controllers`, in axis order.
pub fn actuator_object(spec: &ObjectSpec, ctx: &mut BuildContext) -> Result<Configurable> {
    let axes = spec
        .controller_bindings()
        .iter()
        .map(|c| ctx.local::<AxisCell>(c))
        .collect::<Result<Vec<_>>>()?;
    let hub = ctx.framework().ok().map(|f| f.hub());
    let sinks = ctx.framework()?.sinks.clone();
    let clock = sim::clock(ctx);
    let act = Actuator::new(&spec.name, axes, clock, hub)?;
    let a = Arc::downgrade(&act);
    let sampler: Sampler = Arc::new(move |f: &str| a.upgrade()?.field(f));
    let monitors = MonitorHub::new(&spec.name, sampler, sinks);
    let _ = act.monitors.set(monitors.clone());
    let (a1, a2, a3, a4, a5) = (act.clone(), act.clone(), act.clone(), act.clone(), act.clone());
    Ok(
        with_monitor_methods(Configurable::builder(&spec.name, &spec.type_tag, Scope::Distributed), monitors)
            .method("move_to", move |v| {
                let m: MoveArgs = args(v)?;
                let id = a1.move_to(&m.targets, m.token.as_deref())?;
                Ok(json!({"accepted": true, "move": id}))
            })
            .method("jog", move |v| {
                let j: JogArgs = args(v)?;
                let id = a2.jog(j.axis, j.delta, j.token.as_deref())?;
                Ok(json!({"accepted": true, "move": id}))
            })
            .method("stop", move |v| {
                let t: TokenArgs = args(if v.is_null() { json!({}) } else { v })?;
                let id = a3.stop(t.token.as_deref())?;
                Ok(json!({"accepted": true, "move": id}))
            })
            .method("positions", move |_| reply(a4.positions()))
            .method("status", move |_| Ok(a5.status()))
            .instance(act)
            .build(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::axis::AxisController;

    fn rig(n: usize) -> (Arc<SimClock>, Arc<Actuator>) {
        let clock = SimClock::new(sim::TICK);
        let axes: Vec<_> = (0..n)
            .map(|i| {
                let c = AxisCell::new(&format!("ax{i}"), AxisController::new(0.0, 1.0, -10.0, 10.0).unwrap());
                clock.attach(Arc::downgrade(&c) as Weak<dyn Ticked>);
                c
            })
            .collect();
        let a = Actuator::new("act", axes, clock.clone(), None).unwrap();
        (clock, a)
    }

    #[test]
    fn four_axis_move_settles_on_target() {
        let (clock, a) = rig(4);
        let targets = [0.5, -1.25, 3.0, -0.01];
        a.move_to(&targets, None).unwrap();
        // The farthest axis needs 3.0 / (1.0 * 0.01) = 300 ticks, give or take rounding.
        clock.advance(298);
        assert!(a.moving());
        clock.advance(4);
        assert!(!a.moving());
        for (p, t) in a.positions().iter().zip(targets) {
            assert!((p - t).abs() <= 1e-6);
        }
        assert_eq!(a.axes().iter().map(|x| x.commands()).collect::<Vec<_>>(), [1, 1, 1, 1]);
        assert_eq!(a.completed(), 1);
    }

    #[test]
    fn out_of_range_moves_nothing() {
        let (clock, a) = rig(2);
        let e = a.move_to(&[1.0, 10.5], None).unwrap_err();
        assert_eq!(e.code, ErrorCode::OutOfRange);
        clock.advance(200);
        assert_eq!(a.positions(), [0.0, 0.0]);
        assert!(a.axes().iter().all(|x| x.commands() == 0));
        assert_eq!(a.move_to(&[1.0], None).unwrap_err().code, ErrorCode::BadArgs);
        assert_eq!(a.move_to(&[f64::NAN, 0.0], None).unwrap_err().code, ErrorCode::OutOfRange);
    }

    #[test]
    fn axis_count_is_bounded() {
        let clock = SimClock::new(sim::TICK);
        assert!(Actuator::new("none", vec![], clock.clone(), None).is_err());
        let five = (0..5)
            .map(|i| AxisCell::new(&i.to_string(), AxisController::new(0.0, 1.0, -1.0, 1.0).unwrap()))
            .collect();
        assert!(Actuator::new("five", five, clock, None).is_err());
    }

    #[test]
    fn jog_and_fields() {
        let (clock, a) = rig(2);
        a.jog(1, -0.5, None).unwrap();
        clock.advance(100);
        assert_eq!(a.field("position_1"), Some(FieldValue::Number(-0.5)));
        assert_eq!(a.field("positions"), Some(FieldValue::Text("[0.0,-0.5]".into())));
        assert_eq!(a.field("moving"), Some(FieldValue::Bool(false)));
        assert_eq!(a.field("position_2"), None);
        assert_eq!(a.field("nope"), None);
        assert!(a.jog(2, 1.0, None).is_err());
    }
}
