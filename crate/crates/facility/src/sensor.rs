//! Alignment sensor: a Gaussian response to the actuator's distance from
//! the optimum, seen through the shutter.
//!
//! The sensor lives in a different process from the actuator. It learns
//! the axis positions by monitoring the actuator's `position_<i>` fields,
//! so it is a Director as well as a device.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, OnceLock};
use std::thread;
use std::time::Duration;

use iccs_core::conduit::{ConnectionPolicy, ObjectRef};
use iccs_core::kernel::{args, BuildContext, Configurable, Framework, Scope};
use iccs_core::registry::ObjectSpec;
use iccs_core::statusmon::{with_monitor_methods, MonitorHub, MonitorSpec, Sampler};
use iccs_core::supervisory::{with_update_method, Director, Redelivery, Update, UpdateBody};
use iccs_core::{Error, FieldValue, Result};
use num_traits::Float;
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::shutter::ShutterDrive;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorModel<T> {
    pub sigma: T,
    /// Noise half-width.
    pub eta: T,
    pub seed: u64,
}

fn mix(mut h: u64, x: u64) -> u64 {
    h ^= x.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
    h.rotate_left(23).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

impl<T: Float> SensorModel<T> {
    pub fn new(sigma: T, eta: T, seed: u64) -> Result<Self> {
        if !(sigma > T::zero()) || !sigma.is_finite() {
            return Err(Error::bad_args("sigma must be a finite number > 0"));
        }
        if !(eta >= T::zero()) || !eta.is_finite() {
            return Err(Error::bad_args("eta must be a finite number >= 0"));
        }
        Ok(SensorModel { sigma, eta, seed })
    }

    /// exp(-Σ oᵢ² / σ²)
    pub fn ideal(&self, offsets: &[T]) -> T {
        let r2 = offsets.iter().fold(T::zero(), |acc, &o| acc + o * o);
        (-(r2 / (self.sigma * self.sigma))).exp()
    }

    /// Uniform in [-η, η], a pure function of the seed and the offsets, so
    /// the same trajectory always reads the same values.
    pub fn noise(&self, offsets: &[T]) -> T {
        if self.eta == T::zero() {
            return T::zero();
        }
        let key = offsets
            .iter()
            .fold(self.seed, |h, o| mix(h, o.to_f64().unwrap_or(0.0).to_bits()));
        let u: f64 = ChaCha8Rng::seed_from_u64(key).gen_range(-1.0..=1.0);
        T::from(u).unwrap_or_else(T::zero) * self.eta
    }

    /// Reading in [0, 1]; noise that would leave the range is reflected
    /// back into it, so a noisy sensor does not pin at exactly 1.
    pub fn value(&self, offsets: &[T], open: bool) -> T {
        if !open {
            return T::zero();
        }
        let one = T::one();
        let mut v = self.ideal(offsets) + self.noise(offsets);
        if v > one {
            v = one + one - v;
        }
        v.abs().min(one)
    }
}

/// What the sensor publishes in its `sample` field: a reading together
/// with the positions it was computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub positions: Option<Vec<f64>>,
    pub value: f64,
}

pub struct Sensor {
    name: String,
    model: SensorModel<f64>,
    optimum: Vec<f64>,
    shutter: Arc<ShutterDrive>,
    positions: Mutex<Vec<Option<f64>>>,
    redelivery: Redelivery,
    monitors: OnceLock<Arc<MonitorHub>>,
    stopped: AtomicBool,
}

impl Sensor {
    pub fn new(name: &str, model: SensorModel<f64>, optimum: Vec<f64>, shutter: Arc<ShutterDrive>) -> Arc<Sensor> {
        let n = optimum.len();
        Arc::new(Sensor {
            name: name.to_string(),
            model,
            optimum,
            shutter,
            positions: Mutex::new(vec![None; n]),
            redelivery: Redelivery::new(),
            monitors: OnceLock::new(),
            stopped: AtomicBool::new(false),
        })
    }

    pub fn monitors(&self) -> Option<&Arc<MonitorHub>> {
        self.monitors.get()
    }

    pub fn set_position(&self, axis: usize, x: f64) {
        if let Some(p) = self.positions.lock().get_mut(axis) {
            *p = Some(x);
        }
    }

    pub fn sample(&self) -> Sample {
        let known: Option<Vec<f64>> = self.positions.lock().iter().copied().collect();
        let open = self.shutter.is_open();
        match known {
            Some(p) => {
                let offsets: Vec<f64> = p.iter().zip(&self.optimum).map(|(x, o)| x - o).collect();
                Sample {
                    value: self.model.value(&offsets, open),
                    positions: Some(p),
                }
            }
            // No beam position yet; nothing reaches the detector.
            None => Sample {
                positions: None,
                value: 0.0,
            },
        }
    }

    pub fn read(&self) -> f64 {
        self.sample().value
    }

    fn field(&self, f: &str) -> Option<FieldValue> {
        match f {
            "value" => Some(FieldValue::Number(self.read())),
            "sample" => Some(FieldValue::Text(serde_json::to_string(&self.sample()).ok()?)),
            _ => None,
        }
    }

    /// Keeps trying to monitor the actuator's axes until it succeeds or
    /// the sensor is shut down. Runs off the boot path so the two FEPs can
    /// start in either order.
    fn follow(self: &Arc<Self>, framework: Framework, actuator: String, me: ObjectRef, latency_ms: u64) {
        let sensor = Arc::downgrade(self);
        let axes = self.optimum.len();
        thread::Builder::new()
            .name(format!("{}-follow", self.name))
            .spawn(move || {
                let mut done = 0;
                while done < axes {
                    let Some(s) = sensor.upgrade() else { return };
                    if s.stopped.load(Ordering::SeqCst) {
                        return;
                    }
                    let r = framework
                        .client(&actuator, ConnectionPolicy::default())
                        .and_then(|c| {
                            let spec = MonitorSpec {
                                field: format!("position_{done}"),
                                precision: 0.0,
                                latency_ms,
                                subscriber: me.clone(),
                            };
                            c.invoke("begin_monitoring", serde_json::to_value(spec)?)
                        });
                    drop(s);
                    match r {
                        Ok(_) => done += 1,
                        Err(e) => {
                            log::debug!("sensor waiting for {actuator}: {e}");
                            thread::sleep(Duration::from_millis(100));
                        }
                    }
                }
            })
            .expect("spawn sensor follower");
    }
}

impl Director for Sensor {
    fn update(&self, u: Update) -> Result<()> {
        if !self.redelivery.admit(&u) {
            return Ok(());
        }
        if let UpdateBody::Report(r) = &u.body {
            let axis = r.field.strip_prefix("position_").and_then(|i| i.parse::<usize>().ok());
            if let (Some(i), Some(x)) = (axis, r.value.as_f64()) {
                self.set_position(i, x);
            }
        }
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SensorParams {
    #[serde(default)]
    controllers: Vec<String>,
    actuator: String,
    optimum: Vec<f64>,
    #[serde(default = "default_sigma")]
    sigma: f64,
    #[serde(default = "default_eta")]
    eta: f64,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_latency")]
    latency_ms: u64,
}

fn default_sigma() -> f64 {
    1.0
}

fn default_eta() -> f64 {
    0.01
}

fn default_latency() -> u64 {
    10
}

/// Constructor for the `sensor` distributed type. Binds one `shutter_drive`.
pub fn sensor_object(spec: &ObjectSpec, ctx: &mut BuildContext) -> Result<Configurable> {
    let p: SensorParams = args(spec.params.clone())?;
    let [drive] = p.controllers.as_slice() else {
        return Err(Error::bad_args(format!("sensor {} needs exactly one shutter drive", spec.name)));
    };
    if p.optimum.is_empty() {
        return Err(Error::bad_args("sensor optimum needs at least one axis"));
    }
    let shutter = ctx.local::<ShutterDrive>(drive)?;
    let model = SensorModel::new(p.sigma, p.eta, p.seed)?;
    let sensor = Sensor::new(&spec.name, model, p.optimum, shutter);
    let framework = ctx.framework()?.clone();
    let s = Arc::downgrade(&sensor);
    let sampler: Sampler = Arc::new(move |f: &str| s.upgrade()?.field(f));
    let monitors = MonitorHub::new(&spec.name, sampler, framework.sinks.clone());
    let _ = sensor.monitors.set(monitors.clone());

    let me = ctx.self_ref(&spec.name)?;
    let (s1, s2) = (sensor.clone(), sensor.clone());
    ctx.on_ready(move || {
        s1.follow(framework, p.actuator, me, p.latency_ms);
        Ok(())
    });
    ctx.on_shutdown(move || s2.stopped.store(true, Ordering::SeqCst));

    let (r1, r2) = (sensor.clone(), sensor.clone());
    let builder = with_monitor_methods(Configurable::builder(&spec.name, &spec.type_tag, Scope::Distributed), monitors);
    Ok(with_update_method(builder, sensor.clone())
        .method("read", move |_| Ok(json!(r1.read())))
        .method("sample", move |_| Ok(serde_json::to_value(r2.sample())?))
        .instance(sensor)
        .build())
}

/// Parses a `sample` field value.
pub fn parse_sample(v: &Value) -> Option<Sample> {
    serde_json::from_str(v.as_str()?).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_shutter_reads_zero() {
        let m = SensorModel::new(1.0, 0.3, 7).unwrap();
        assert_eq!(m.value(&[0.0, 0.0], false), 0.0);
    }

    #[test]
    fn centered_noiseless_reads_one() {
        let m = SensorModel::new(1.0, 0.0, 7).unwrap();
        assert_eq!(m.value(&[0.0, 0.0], true), 1.0);
        let expected = (-0.5f64).exp();
        assert!((m.value(&[0.5, -0.5], true) - expected).abs() < 1e-15);
    }

    #[test]
    fn generic_over_scalar() {
        let m = SensorModel::<f32>::new(2.0, 0.0, 1).unwrap();
        assert!((m.ideal(&[1.0, 1.0]) - (-0.5f32).exp()).abs() < 1e-6);
    }

    #[test]
    fn noise_is_seeded_and_bounded() {
        let a = SensorModel::new(1.0, 0.05, 42).unwrap();
        let b = SensorModel::new(1.0, 0.05, 42).unwrap();
        let c = SensorModel::new(1.0, 0.05, 43).unwrap();
        let trajectory: Vec<[f64; 2]> = (0..200).map(|i| [0.01 * i as f64, -0.003 * i as f64]).collect();
        let run = |m: &SensorModel<f64>| trajectory.iter().map(|o| m.value(o, true)).collect::<Vec<_>>();
        assert_eq!(run(&a), run(&b));
        assert_ne!(run(&a), run(&c));
        for o in &trajectory {
            assert!(a.noise(o).abs() <= 0.05);
            let v = a.value(o, true);
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn bad_parameters() {
        assert!(SensorModel::new(0.0, 0.0, 0).is_err());
        assert!(SensorModel::new(1.0, -0.1, 0).is_err());
    }

    #[test]
    fn sample_waits_for_every_axis() {
        let shutter = ShutterDrive::new(crate::shutter::ShutterState::Open, Duration::ZERO).unwrap();
        let s = Sensor::new("s", SensorModel::new(1.0, 0.0, 0).unwrap(), vec![0.0, 0.0], shutter);
        assert_eq!(s.sample().positions, None);
        s.set_position(0, 0.5);
        assert_eq!(s.read(), 0.0);
        s.set_position(1, -0.5);
        let got = s.sample();
        assert_eq!(got.positions, Some(vec![0.5, -0.5]));
        assert!((got.value - (-0.5f64).exp()).abs() < 1e-15);
        let text = s.field("sample").unwrap();
        let back = parse_sample(&json!(text.as_str().unwrap())).unwrap();
        assert_eq!(back, got);
    }
}
