//! Simulated motor axis: a local controller that integrates its position
//! toward a commanded target at a fixed velocity.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::time::Duration;

use iccs_core::kernel::{args, BuildContext, Configurable, Scope};
use iccs_core::registry::ObjectSpec;
use iccs_core::{Error, ErrorCode, Result};
use num_traits::Float;
use parking_lot::Mutex;
use serde::Deserialize;

use crate::sim::{self, Deferred, Ticked};

#[derive(Debug, Clone, PartialEq)]
pub struct AxisController<T> {
    position: T,
    target: T,
    /// Units per second, > 0.
    velocity: T,
    min: T,
    max: T,
}

impl<T: Float> AxisController<T> {
    pub fn new(position: T, velocity: T, min: T, max: T) -> Result<Self> {
        if !(min <= max) {
            return Err(Error::bad_args("axis limits must satisfy min <= max"));
        }
        if !(velocity > T::zero()) || !velocity.is_finite() {
            return Err(Error::bad_args("axis velocity must be a finite number > 0"));
        }
        if !(min <= position && position <= max) {
            return Err(Error::new(ErrorCode::OutOfRange, "initial position outside limits"));
        }
        Ok(AxisController {
            position,
            target: position,
            velocity,
            min,
            max,
        })
    }

    pub fn position(&self) -> T {
        self.position
    }

    pub fn target(&self) -> T {
        self.target
    }

    pub fn velocity(&self) -> T {
        self.velocity
    }

    pub fn limits(&self) -> (T, T) {
        (self.min, self.max)
    }

    pub fn moving(&self) -> bool {
        self.position != self.target
    }

    pub fn within_limits(&self, x: T) -> bool {
        self.min <= x && x <= self.max
    }

    pub fn command(&mut self, target: T) -> Result<()> {
        if !self.within_limits(target) {
            return Err(Error::new(ErrorCode::OutOfRange, "target outside axis limits"));
        }
        self.target = target;
        Ok(())
    }

    /// Moves at most `velocity * dt` toward the target, landing on it
    /// exactly when it is within reach.
    pub fn step(&mut self, dt: T) {
        let reach = self.velocity * dt;
        let gap = self.target - self.position;
        self.position = if gap.abs() <= reach {
            self.target
        } else {
            self.position + reach.copysign(gap)
        };
    }
}

/// A shared axis as hosted in a process: the controller plus a count of
/// commands it has received.
pub struct AxisCell {
    pub name: String,
    axis: Mutex<AxisController<f64>>,
    commands: AtomicU64,
}

impl AxisCell {
    pub fn new(name: &str, axis: AxisController<f64>) -> Arc<AxisCell> {
        Arc::new(AxisCell {
            name: name.to_string(),
            axis: Mutex::new(axis),
            commands: AtomicU64::new(0),
        })
    }

    pub fn snapshot(&self) -> AxisController<f64> {
        self.axis.lock().clone()
    }

    pub fn position(&self) -> f64 {
        self.axis.lock().position()
    }

    pub fn command(&self, target: f64) -> Result<()> {
        self.axis.lock().command(target)?;
        self.commands.fetch_add(1, Ordering::SeqCst);
        Ok(())
    }

    pub fn commands(&self) -> u64 {
        self.commands.load(Ordering::SeqCst)
    }
}

impl Ticked for AxisCell {
    fn tick(&self, dt: Duration) -> Option<Deferred> {
        self.axis.lock().step(dt.as_secs_f64());
        None
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AxisParams {
    #[serde(default)]
    position: f64,
    #[serde(default = "default_velocity")]
    velocity: f64,
    #[serde(default = "default_limits")]
    limits: [f64; 2],
}

fn default_velocity() -> f64 {
    1.0
}

fn default_limits() -> [f64; 2] {
    [-10.0, 10.0]
}

/// Constructor for the `stepper_axis` local type.
pub fn axis_object(spec: &ObjectSpec, ctx: &mut BuildContext) -> Result<Configurable> {
    let p: AxisParams = args(if spec.params.is_null() {
        serde_json::json!({})
    } else {
        spec.params.clone()
    })?;
    let cell = AxisCell::new(
        &spec.name,
        AxisController::new(p.position, p.velocity, p.limits[0], p.limits[1])?,
    );
    sim::clock(ctx).attach(Arc::downgrade(&cell) as Weak<dyn Ticked>);
    Ok(Configurable::builder(&spec.name, &spec.type_tag, Scope::Local)
        .instance(cell)
        .build())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reaches_target_exactly() {
        let mut a = AxisController::new(0.0, 1.0, -10.0, 10.0).unwrap();
        a.command(0.25).unwrap();
        let mut ticks = 0;
        while a.moving() {
            a.step(0.01);
            ticks += 1;
        }
        assert_eq!(a.position(), 0.25);
        assert_eq!(ticks, 25);
    }

    #[test]
    fn limits_are_checked() {
        let mut a = AxisController::new(0.0f32, 2.0, -1.0, 1.0).unwrap();
        assert_eq!(a.command(1.5).unwrap_err().code, ErrorCode::OutOfRange);
        assert_eq!(a.target(), 0.0);
        assert!(AxisController::new(0.0, 0.0, -1.0, 1.0).is_err());
        assert!(AxisController::new(5.0, 1.0, -1.0, 1.0).is_err());
        assert!(AxisController::new(0.0, 1.0, 1.0, -1.0).is_err());
    }

    proptest! {
        #[test]
        fn step_is_bounded_and_stays_in_limits(
            start in -10.0f64..10.0,
            targets in prop::collection::vec(-10.0f64..10.0, 1..6),
            v in 0.01f64..50.0,
            steps in 1usize..200,
        ) {
            let dt = 0.01;
            let mut a = AxisController::new(start, v, -10.0, 10.0).unwrap();
            for t in targets {
                a.command(t).unwrap();
                for _ in 0..steps {
                    let before = a.position();
                    a.step(dt);
                    prop_assert!((a.position() - before).abs() <= v * dt * (1.0 + 1e-12));
                    prop_assert!(a.within_limits(a.position()));
                    prop_assert_eq!(a.moving(), a.position() != a.target());
                }
            }
        }
    }
}
