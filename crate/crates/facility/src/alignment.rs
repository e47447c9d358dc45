//! Closed-loop alignment LCU: coordinate descent on the actuator, driven
//! by status-monitor reports from the sensor. It never polls.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, OnceLock, Weak};
use std::thread;
use std::time::{Duration, Instant};

use iccs_core::conduit::{Client, ConnectionPolicy, ObjectRef};
use iccs_core::kernel::{args, reply, BuildContext, Configurable, Framework, Scope};
use iccs_core::registry::ObjectSpec;
use iccs_core::services::ServiceHub;
use iccs_core::statusmon::MonitorSpec;
use iccs_core::supervisory::{
    with_lcu_methods, with_update_method, DataMapper, DeliveryPolicy, Director, Lcu, Redelivery, Update, UpdateBody,
};
use iccs_core::{Error, ErrorCode, FieldValue, Result};
use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::sensor::{parse_sample, Sample};

/// Event emitted for every probe, in order. With a fixed seed and config
/// the sequence of payloads is reproducible.
pub const PROBE_EVENT: &str = "align_probe";
pub const DONE_EVENT: &str = "align_done";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Idle,
    Aligning,
    Aligned,
    Fault,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Idle => "idle",
            Phase::Aligning => "aligning",
            Phase::Aligned => "aligned",
            Phase::Fault => "fault",
        }
    }

    /// idle → aligning → {aligned, fault} → idle.
    pub fn can_become(self, next: Phase) -> bool {
        matches!(
            (self, next),
            (Phase::Idle, Phase::Aligning)
                | (Phase::Aligning, Phase::Aligned)
                | (Phase::Aligning, Phase::Fault)
                | (Phase::Aligned, Phase::Idle)
                | (Phase::Fault, Phase::Idle)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignState {
    pub phase: Phase,
    pub iteration: u32,
    pub best: f64,
    pub positions: Vec<f64>,
}

impl AlignState {
    fn enter(&mut self, next: Phase) -> Result<()> {
        if !self.phase.can_become(next) {
            return Err(Error::app(format!("cannot go from {} to {}", self.phase.as_str(), next.as_str())));
        }
        self.phase = next;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescentParams {
    pub threshold: f64,
    pub max_iters: u32,
    pub step: f64,
    pub step_floor: f64,
}

impl DescentParams {
    pub fn new(threshold: f64, max_iters: u32) -> Result<Self> {
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err(Error::bad_args("threshold must be in (0, 1]"));
        }
        Ok(DescentParams {
            threshold,
            max_iters,
            step: 0.1,
            step_floor: 0.001,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub iteration: u32,
    pub axis: usize,
    pub step: f64,
    pub targets: Vec<f64>,
    /// `None` when the actuator refused the targets as out of range.
    pub value: Option<f64>,
    pub accepted: bool,
    pub best: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentResult {
    pub aligned: bool,
    pub positions: Vec<f64>,
    pub best: f64,
    pub iterations: u32,
}

/// Coordinate descent: probe each axis in turn by ±step, keep any probe
/// that improves on the best reading, halve the step (down to the floor)
/// after a full round without improvement. `observe` moves to the given
/// positions and returns the reading there; OUT_OF_RANGE counts as a
/// rejected probe, any other error ends the run.
pub fn coordinate_descent(
    start: &[f64],
    p: &DescentParams,
    mut observe: impl FnMut(&[f64]) -> Result<f64>,
    mut on_probe: impl FnMut(&Probe) -> Result<()>,
) -> Result<DescentResult> {
    let n = start.len();
    if n == 0 {
        return Err(Error::bad_args("nothing to align"));
    }
    let mut pos = start.to_vec();
    let mut best = observe(&pos)?;
    let mut step = p.step;
    let (mut axis, mut dir, mut misses, mut iteration) = (0usize, 1.0f64, 0usize, 0u32);
    while best < p.threshold {
        if iteration >= p.max_iters {
            return Ok(DescentResult {
                aligned: false,
                positions: pos,
                best,
                iterations: iteration,
            });
        }
        iteration += 1;
        let mut cand = pos.clone();
        cand[axis] += dir * step;
        let value = match observe(&cand) {
            Ok(v) => Some(v),
            Err(e) if e.code == ErrorCode::OutOfRange => None,
            Err(e) => return Err(e),
        };
        let accepted = value.is_some_and(|v| v > best);
        let probe = Probe {
            iteration,
            axis,
            step,
            targets: cand.clone(),
            value,
            accepted,
            best: if accepted { value.unwrap_or(best) } else { best },
        };
        if accepted {
            pos = cand;
            best = probe.best;
            misses = 0;
        } else {
            misses += 1;
            if dir > 0.0 {
                dir = -1.0;
            } else {
                dir = 1.0;
                axis = (axis + 1) % n;
            }
            if misses >= 2 * n {
                step = (step / 2.0).max(p.step_floor);
                misses = 0;
            }
        }
        on_probe(&probe)?;
    }
    Ok(DescentResult {
        aligned: true,
        positions: pos,
        best,
        iterations: iteration,
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LcuParams {
    actuator: String,
    sensor: String,
    #[serde(default = "default_latency")]
    latency_ms: u64,
    #[serde(default = "default_settle")]
    settle_timeout_ms: u64,
    #[serde(default)]
    step: Option<f64>,
    #[serde(default)]
    step_floor: Option<f64>,
}

fn default_latency() -> u64 {
    10
}

fn default_settle() -> u64 {
    10_000
}

#[derive(Deserialize)]
struct AlignArgs {
    threshold: f64,
    max_iters: u32,
}

#[derive(Deserialize)]
struct WaitArgs {
    #[serde(default = "default_wait")]
    timeout_ms: u64,
}

fn default_wait() -> u64 {
    60_000
}

#[derive(Default)]
struct View {
    sample: Option<Sample>,
    positions: Vec<Option<f64>>,
}

pub struct AlignmentLcu {
    name: String,
    lcu: Arc<Lcu<AlignState>>,
    framework: Option<Framework>,
    actuator: String,
    sensor: String,
    settle: Duration,
    step: f64,
    step_floor: f64,
    view: Mutex<View>,
    changed: Condvar,
    redelivery: Redelivery,
    abort: AtomicBool,
    me: OnceLock<Weak<AlignmentLcu>>,
}

fn summary(s: &AlignState) -> Vec<(String, FieldValue)> {
    vec![
        ("phase".into(), FieldValue::Text(s.phase.as_str().into())),
        ("iteration".into(), FieldValue::Number(s.iteration as f64)),
        ("best".into(), FieldValue::Number(s.best)),
    ]
}

fn positions(s: &AlignState) -> Vec<(String, FieldValue)> {
    s.positions
        .iter()
        .enumerate()
        .map(|(i, p)| (format!("axis_{i}"), FieldValue::Number(*p)))
        .collect()
}

fn same_positions(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-9)
}

impl AlignmentLcu {
    pub fn lcu(&self) -> &Arc<Lcu<AlignState>> {
        &self.lcu
    }

    pub fn phase(&self) -> Phase {
        self.lcu.inspect(|s| s.phase)
    }

    pub fn status(&self) -> Value {
        self.lcu.inspect(|s| {
            json!({"phase": s.phase, "iteration": s.iteration, "best": s.best, "positions": s.positions})
        })
    }

    fn hub(&self) -> Option<Arc<dyn ServiceHub>> {
        self.framework.as_ref().map(|f| f.hub())
    }

    fn client(&self, object: &str) -> Result<Client> {
        self.framework
            .as_ref()
            .ok_or_else(|| Error::app("no framework"))?
            .client(object, ConnectionPolicy::recovering(3))
    }

    /// Subscribes to the sensor's `sample` and the actuator's axis positions.
    fn follow(&self, me: &ObjectRef, latency_ms: u64) -> Result<()> {
        let act = self.client(&self.actuator)?;
        let axes = act.invoke("status", Value::Null)?["positions"]
            .as_array()
            .map(|a| a.len())
            .ok_or_else(|| Error::app(format!("{} did not report its axes", self.actuator)))?;
        self.view.lock().positions = vec![None; axes];
        self.lcu.evolve(|s| {
            s.positions = vec![0.0; axes];
            Ok(())
        })?;
        let spec = |field: String| MonitorSpec {
            field,
            precision: 0.0,
            latency_ms,
            subscriber: me.clone(),
        };
        self.client(&self.sensor)?
            .invoke("begin_monitoring", serde_json::to_value(spec("sample".into()))?)?;
        for i in 0..axes {
            act.invoke("begin_monitoring", serde_json::to_value(spec(format!("position_{i}")))?)?;
        }
        Ok(())
    }

    fn wait_view<R>(&self, deadline: Instant, mut pick: impl FnMut(&View) -> Option<R>) -> Result<R> {
        let mut v = self.view.lock();
        loop {
            if let Some(r) = pick(&v) {
                return Ok(r);
            }
            if self.abort.load(Ordering::SeqCst) {
                return Err(Error::app("alignment stopped"));
            }
            if self.changed.wait_until(&mut v, deadline).timed_out() {
                return pick(&v).ok_or_else(|| Error::new(ErrorCode::Timeout, "no sensor reading for the commanded positions"));
            }
        }
    }

    /// Commands the actuator and waits for the sensor report taken at
    /// exactly those positions.
    fn observe(&self, act: &Client, token: &str, targets: &[f64]) -> Result<f64> {
        act.invoke("move_to", json!({"targets": targets, "token": token}))?;
        let deadline = Instant::now() + self.settle;
        self.wait_view(deadline, |v| {
            let s = v.sample.as_ref()?;
            same_positions(s.positions.as_deref()?, targets).then_some(s.value)
        })
    }

    pub fn align(&self, threshold: f64, max_iters: u32) -> Result<Value> {
        let params = DescentParams {
            step: self.step,
            step_floor: self.step_floor,
            ..DescentParams::new(threshold, max_iters)?
        };
        let framework = self.framework.clone().ok_or_else(|| Error::app("no framework"))?;
        self.lcu.evolve(|s| {
            s.enter(Phase::Aligning)?;
            s.iteration = 0;
            Ok(())
        })?;
        let token = match framework.services.reserve(&self.actuator, &self.name) {
            Ok(r) => r.token,
            Err(e) => {
                self.finish(Phase::Fault, &format!("reservation refused: {e}"));
                return Err(e);
            }
        };
        self.abort.store(false, Ordering::SeqCst);
        let me = self.me.get().and_then(Weak::upgrade).ok_or_else(|| Error::app("lcu is gone"))?;
        thread::Builder::new()
            .name(format!("{}-align", self.name))
            .spawn(move || {
                let outcome = me.run(&params, &token);
                if let Err(e) = framework.services.release(&token) {
                    log::warn!("{}: release failed: {e}", me.name);
                }
                match outcome {
                    Ok(r) if r.aligned => me.finish(Phase::Aligned, "threshold reached"),
                    Ok(_) => me.finish(Phase::Fault, "max_iters exhausted"),
                    Err(e) => me.finish(Phase::Fault, &e.to_string()),
                }
            })
            .map_err(|e| Error::app(e.to_string()))?;
        Ok(json!({"phase": Phase::Aligning}))
    }

    fn run(&self, params: &DescentParams, token: &str) -> Result<DescentResult> {
        let act = self.client(&self.actuator)?;
        let deadline = Instant::now() + self.settle;
        let start: Vec<f64> = self.wait_view(deadline, |v| v.positions.iter().copied().collect())?;
        let hub = self.hub();
        let name = self.name.clone();
        let result = coordinate_descent(
            &start,
            params,
            |t| self.observe(&act, token, t),
            |p| {
                if let Some(h) = &hub {
                    h.emit(PROBE_EVENT, &name, serde_json::to_value(p)?);
                }
                self.lcu.evolve(|s| {
                    s.iteration = p.iteration;
                    s.best = p.best;
                    Ok(())
                })?;
                Ok(())
            },
        )?;
        if !result.aligned {
            // Leave the optic at the best place found.
            self.observe(&act, token, &result.positions)?;
        }
        Ok(result)
    }

    // The event is stored before the phase changes, so anyone released by
    // `wait` can already see it.
    fn finish(&self, phase: Phase, reason: &str) {
        if let Some(f) = &self.framework {
            let st = self.status();
            let payload = json!({"phase": phase, "reason": reason, "iteration": st["iteration"], "best": st["best"]});
            if let Err(e) = f.services.emit_now(DONE_EVENT, &self.name, payload) {
                log::warn!("{}: {DONE_EVENT} not recorded: {e}", self.name);
            }
        }
        if let Err(e) = self.lcu.evolve(|s| s.enter(phase)) {
            log::warn!("{}: {e}", self.name);
        }
        // Taken so a waiter between its phase check and its wait cannot miss this.
        let _v = self.view.lock();
        self.changed.notify_all();
    }

    pub fn stop(&self) {
        self.abort.store(true, Ordering::SeqCst);
        self.changed.notify_all();
    }

    pub fn reset(&self) -> Result<()> {
        self.lcu.evolve(|s| s.enter(Phase::Idle))?;
        Ok(())
    }

    /// Blocks until the phase leaves `aligning`.
    pub fn wait(&self, timeout: Duration) -> Result<Value> {
        let deadline = Instant::now() + timeout;
        let mut v = self.view.lock();
        while self.phase() == Phase::Aligning {
            if self.changed.wait_until(&mut v, deadline).timed_out() && self.phase() == Phase::Aligning {
                return Err(Error::new(ErrorCode::Timeout, "still aligning"));
            }
        }
        drop(v);
        Ok(self.status())
    }
}

impl Director for AlignmentLcu {
    fn update(&self, u: Update) -> Result<()> {
        if !self.redelivery.admit(&u) {
            return Ok(());
        }
        let UpdateBody::Report(r) = &u.body else { return Ok(()) };
        let mut axis_moved = None;
        {
            let mut v = self.view.lock();
            if u.publisher == self.sensor && r.field == "sample" {
                v.sample = r.value.as_str().and_then(|t| parse_sample(&json!(t)));
            } else if u.publisher == self.actuator {
                let i = r.field.strip_prefix("position_").and_then(|i| i.parse::<usize>().ok());
                if let (Some(i), Some(x)) = (i, r.value.as_f64()) {
                    if let Some(p) = v.positions.get_mut(i) {
                        *p = Some(x);
                        axis_moved = Some((i, x));
                    }
                }
            }
        }
        self.changed.notify_all();
        if let Some((i, x)) = axis_moved {
            self.lcu.evolve(|s| {
                if let Some(p) = s.positions.get_mut(i) {
                    *p = x;
                }
                Ok(())
            })?;
        }
        Ok(())
    }
}

/// Constructor for the `alignment_lcu` distributed type.
pub fn lcu_object(spec: &ObjectSpec, ctx: &mut BuildContext) -> Result<Configurable> {
    let p: LcuParams = args(spec.params.clone())?;
    let framework = ctx.framework()?.clone();
    let lcu = Lcu::new(
        &spec.name,
        AlignState {
            phase: Phase::Idle,
            iteration: 0,
            best: 0.0,
            positions: vec![],
        },
        vec![DataMapper::new("summary", summary), DataMapper::new("positions", positions)],
        framework.sinks.clone(),
        DeliveryPolicy::default(),
        Some(framework.hub()),
    );
    let a = Arc::new(AlignmentLcu {
        name: spec.name.clone(),
        lcu: lcu.clone(),
        framework: Some(framework),
        actuator: p.actuator,
        sensor: p.sensor,
        settle: Duration::from_millis(p.settle_timeout_ms),
        step: p.step.unwrap_or(0.1),
        step_floor: p.step_floor.unwrap_or(0.001),
        view: Mutex::new(View::default()),
        changed: Condvar::new(),
        redelivery: Redelivery::new(),
        abort: AtomicBool::new(false),
        me: OnceLock::new(),
    });
    let _ = a.me.set(Arc::downgrade(&a));
    let me = ctx.self_ref(&spec.name)?;
    let f = a.clone();
    ctx.on_ready(move || f.follow(&me, p.latency_ms));
    let s = a.clone();
    ctx.on_shutdown(move || s.stop());

    let (a1, a2, a3, a4, a5) = (a.clone(), a.clone(), a.clone(), a.clone(), a.clone());
    let builder = with_lcu_methods(Configurable::builder(&spec.name, &spec.type_tag, Scope::Distributed), lcu);
    Ok(with_update_method(builder, a.clone())
        .concurrent("align", move |v| {
            let x: AlignArgs = args(v)?;
            a1.align(x.threshold, x.max_iters)
        })
        .concurrent("wait", move |v| {
            let w: WaitArgs = args(if v.is_null() { json!({}) } else { v })?;
            a2.wait(Duration::from_millis(w.timeout_ms))
        })
        .concurrent("stop", move |_| {
            a3.stop();
            Ok(Value::Null)
        })
        .method("reset", move |_| {
            a4.reset()?;
            reply(a4.status())
        })
        .concurrent("status", move |_| Ok(a5.status()))
        .instance(a)
        .build())
}
