//! Logical simulation clock. One per process; every simulated controller
//! in the process advances on the same tick, under one lock, so device
//! methods never observe a half-applied tick.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::thread;
use std::time::Duration;

use iccs_core::kernel::{args, BuildContext, Configurable, Scope};
use iccs_core::{Error, Result};
use parking_lot::{Mutex, MutexGuard};
use serde::Deserialize;

pub const TICK: Duration = Duration::from_millis(10);

/// Work a member wants done after the tick lock is released, such as
/// emitting an event over the network.
pub type Deferred = Box<dyn FnOnce() + Send>;

pub trait Ticked: Send + Sync {
    /// Advances by `dt`. Called with the clock held.
    fn tick(&self, dt: Duration) -> Option<Deferred>;
}

pub struct SimClock {
    tick: Duration,
    gate: Mutex<Vec<Weak<dyn Ticked>>>,
    ticks: AtomicU64,
    rate: Mutex<f64>,
    running: AtomicBool,
    stopped: AtomicBool,
}

/// Holds the clock still. Device commands take this before touching
/// several controllers so the change lands between two ticks.
pub struct Hold<'a>(#[allow(dead_code)] MutexGuard<'a, Vec<Weak<dyn Ticked>>>);

impl SimClock {
    pub fn new(tick: Duration) -> Arc<SimClock> {
        Arc::new(Self::unshared(tick))
    }

    fn unshared(tick: Duration) -> SimClock {
        SimClock {
            tick,
            gate: Mutex::new(Vec::new()),
            ticks: AtomicU64::new(0),
            rate: Mutex::new(1.0),
            running: AtomicBool::new(false),
            stopped: AtomicBool::new(false),
        }
    }

    pub fn tick_duration(&self) -> Duration {
        self.tick
    }

    /// Members tick in attach order.
    pub fn attach(&self, member: Weak<dyn Ticked>) {
        self.gate.lock().push(member);
    }

    pub fn ticks(&self) -> u64 {
        self.ticks.load(Ordering::SeqCst)
    }

    pub fn hold(&self) -> Hold<'_> {
        Hold(self.gate.lock())
    }

    pub fn advance(&self, n: u64) {
        for _ in 0..n {
            let deferred: Vec<Deferred> = {
                let mut members = self.gate.lock();
                members.retain(|m| m.strong_count() > 0);
                let out = members
                    .iter()
                    .filter_map(|m| m.upgrade())
                    .filter_map(|m| m.tick(self.tick))
                    .collect();
                self.ticks.fetch_add(1, Ordering::SeqCst);
                out
            };
            for d in deferred {
                d();
            }
        }
    }

    /// Simulated seconds per wall second; 0 means ticks only advance
    /// through [`advance`](Self::advance).
    pub fn set_rate(&self, rate: f64) -> Result<()> {
        if !(rate >= 0.0 && rate.is_finite()) {
            return Err(Error::bad_args("clock rate must be a finite number >= 0"));
        }
        *self.rate.lock() = rate;
        Ok(())
    }

    pub fn rate(&self) -> f64 {
        *self.rate.lock()
    }

    /// Starts the driver thread unless the rate is 0. Idempotent.
    pub fn start(self: &Arc<Self>) {
        let rate = self.rate();
        if rate == 0.0 || self.running.swap(true, Ordering::SeqCst) {
            return;
        }
        let period = self.tick.div_f64(rate);
        let me = Arc::downgrade(self);
        thread::Builder::new()
            .name("sim-clock".into())
            .spawn(move || loop {
                thread::sleep(period);
                let Some(clock) = me.upgrade() else { return };
                if clock.stopped.load(Ordering::SeqCst) {
                    return;
                }
                clock.advance(1);
            })
            .expect("spawn clock thread");
    }

    pub fn stop(&self) {
        self.stopped.store(true, Ordering::SeqCst);
    }
}

/// The process clock, created on first use. The driver starts when the
/// process is ready and stops with it.
pub fn clock(ctx: &mut BuildContext) -> Arc<SimClock> {
    if let Some(c) = ctx.extension::<SimClock>() {
        return c;
    }
    let c = ctx.extension_or_insert_with(|| SimClock::unshared(TICK));
    let (a, b) = (c.clone(), c.clone());
    ctx.on_ready(move || {
        a.start();
        Ok(())
    });
    ctx.on_shutdown(move || b.stop());
    c
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ClockParams {
    #[serde(default = "one")]
    rate: f64,
}

fn one() -> f64 {
    1.0
}

/// Optional local object that configures the process clock.
/// `params.rate` is simulated seconds per wall second (0 = manual).
pub fn clock_object(spec: &iccs_core::registry::ObjectSpec, ctx: &mut BuildContext) -> Result<Configurable> {
    let p: ClockParams = args(if spec.params.is_null() {
        serde_json::json!({})
    } else {
        spec.params.clone()
    })?;
    let c = clock(ctx);
    c.set_rate(p.rate)?;
    Ok(Configurable::builder(&spec.name, &spec.type_tag, Scope::Local)
        .instance(c)
        .build())
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Counter(Mutex<u32>);

    impl Ticked for Counter {
        fn tick(&self, _: Duration) -> Option<Deferred> {
            *self.0.lock() += 1;
            None
        }
    }

    #[test]
    fn manual_advance_ticks_every_member() {
        let c = SimClock::new(TICK);
        let a = Arc::new(Counter(Mutex::new(0)));
        let b = Arc::new(Counter(Mutex::new(0)));
        c.attach(Arc::downgrade(&a) as Weak<dyn Ticked>);
        c.attach(Arc::downgrade(&b) as Weak<dyn Ticked>);
        c.advance(7);
        assert_eq!((*a.0.lock(), *b.0.lock(), c.ticks()), (7, 7, 7));
        drop(b);
        c.advance(1);
        assert_eq!(*a.0.lock(), 8);
    }

    #[test]
    fn rate_zero_never_runs() {
        let c = SimClock::new(TICK);
        c.set_rate(0.0).unwrap();
        c.start();
        thread::sleep(Duration::from_millis(40));
        assert_eq!(c.ticks(), 0);
        assert!(c.set_rate(-1.0).is_err());
    }

    #[test]
    fn realtime_driver_advances() {
        let c = SimClock::new(TICK);
        c.set_rate(10.0).unwrap();
        c.start();
        thread::sleep(Duration::from_millis(100));
        c.stop();
        assert!(c.ticks() > 10, "{}", c.ticks());
    }
}
