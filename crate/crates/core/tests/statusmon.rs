use std::sync::Arc;
use std::time::{Duration, Instant};

use iccs_core::conduit::ObjectRef;
use iccs_core::statusmon::{filter_sequence, MonitorHub, MonitorSpec, ReportReason, Sample, Sampler, StatusReport};
use iccs_core::supervisory::{Director, LocalSinks, Update};
use iccs_core::{ErrorCode, FieldValue};
use parking_lot::{Condvar, Mutex};
use proptest::prelude::*;

#[derive(Default)]
struct Reports {
    got: Mutex<Vec<(Instant, StatusReport)>>,
    cv: Condvar,
}

impl Director for Reports {
    fn update(&self, u: Update) -> iccs_core::Result<()> {
        self.got.lock().push((Instant::now(), u.report().unwrap().clone()));
        self.cv.notify_all();
        Ok(())
    }
}

impl Reports {
    fn wait_for(&self, pred: impl Fn(&[(Instant, StatusReport)]) -> bool, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut g = self.got.lock();
        while !pred(&g) {
            if self.cv.wait_until(&mut g, deadline).timed_out() {
                return pred(&g);
            }
        }
        true
    }

    fn values(&self) -> Vec<f64> {
        self.got.lock().iter().map(|(_, r)| r.value.as_f64().unwrap()).collect()
    }
}

struct Rig {
    value: Arc<Mutex<f64>>,
    hub: Arc<MonitorHub>,
    sinks: LocalSinks,
}

fn rig() -> Rig {
    let value = Arc::new(Mutex::new(0.0));
    let v = value.clone();
    let sampler: Sampler = Arc::new(move |field: &str| match field {
        "position" => Some(FieldValue::Number(*v.lock())),
        "state" => Some(FieldValue::Text("open".into())),
        _ => None,
    });
    let sinks = LocalSinks::new();
    let hub = MonitorHub::new("actuator_A", sampler, Arc::new(sinks.clone()));
    Rig { value, hub, sinks }
}

impl Rig {
    fn subscriber(&self, name: &str) -> (Arc<Reports>, ObjectRef) {
        let r = Arc::new(Reports::default());
        let at = ObjectRef::new("127.0.0.1", 1, "sup", name).unwrap();
        self.sinks.insert(at.clone(), r.clone());
        (r, at)
    }

    fn spec(&self, subscriber: &ObjectRef, precision: f64, latency_ms: u64) -> MonitorSpec {
        MonitorSpec {
            field: "position".into(),
            precision,
            latency_ms,
            subscriber: subscriber.clone(),
        }
    }

    fn set(&self, v: f64) {
        *self.value.lock() = v;
    }
}

#[test]
fn initial_report_comes_first() {
    let rig = rig();
    let (r, at) = rig.subscriber("lcu");
    rig.set(2.5);
    rig.hub.begin(rig.spec(&at, 0.1, 10)).unwrap();
    assert!(r.wait_for(|g| !g.is_empty(), Duration::from_secs(1)));
    rig.set(3.0);
    assert!(r.wait_for(|g| g.len() >= 2, Duration::from_secs(1)));
    let g = r.got.lock();
    assert_eq!(g[0].1.reason, ReportReason::Initial);
    assert_eq!(g[0].1.value, FieldValue::Number(2.5));
    assert_eq!(g[0].1.device, "actuator_A");
    assert!(g[1..].iter().all(|(_, x)| x.reason == ReportReason::Change));
}

#[test]
fn each_subscriber_gets_its_own_precision() {
    let rig = rig();
    let (fine, fa) = rig.subscriber("fine");
    let (coarse, ca) = rig.subscriber("coarse");
    rig.hub.begin(rig.spec(&fa, 0.1, 5)).unwrap();
    rig.hub.begin(rig.spec(&ca, 1.0, 5)).unwrap();
    let steps = [0.05, 0.2, 0.5, 0.9, 1.05, 1.3, 2.2, 2.25];
    for s in steps {
        rig.set(s);
        std::thread::sleep(Duration::from_millis(40));
    }
    let oracle = |p: f64| -> Vec<f64> {
        let mut seq = vec![0.0];
        seq.extend(steps);
        let mut last = None::<f64>;
        let mut out = vec![];
        for x in seq {
            match last {
                None => {
                    out.push(x);
                    last = Some(x);
                }
                Some(l) if x != l && (x - l).abs() >= p => {
                    out.push(x);
                    last = Some(x);
                }
                _ => {}
            }
        }
        out
    };
    std::thread::sleep(Duration::from_millis(50));
    assert_eq!(fine.values(), oracle(0.1));
    assert_eq!(coarse.values(), oracle(1.0));
    assert!(fine.values().len() > coarse.values().len());
}

#[test]
fn unknown_field_and_bad_specs() {
    let rig = rig();
    let (_r, at) = rig.subscriber("lcu");
    let mut s = rig.spec(&at, 0.1, 10);
    s.field = "voltage".into();
    assert_eq!(rig.hub.begin(s).unwrap_err().code, ErrorCode::NoSuchObject);
    assert_eq!(rig.hub.begin(rig.spec(&at, -1.0, 10)).unwrap_err().code, ErrorCode::BadArgs);
    assert_eq!(rig.hub.begin(rig.spec(&at, 0.1, 0)).unwrap_err().code, ErrorCode::BadArgs);
}

#[test]
fn end_stops_reports_and_leaves_others_running() {
    let rig = rig();
    let (a, aa) = rig.subscriber("a");
    let (b, ba) = rig.subscriber("b");
    let ida = rig.hub.begin(rig.spec(&aa, 0.0, 5)).unwrap();
    rig.hub.begin(rig.spec(&ba, 0.0, 5)).unwrap();
    assert!(a.wait_for(|g| g.len() == 1, Duration::from_secs(1)));
    rig.hub.end(ida).unwrap();
    assert_eq!(rig.hub.end(ida).unwrap_err().code, ErrorCode::NoSuchObject);
    rig.set(100.0);
    assert!(b.wait_for(|g| g.len() == 2, Duration::from_secs(1)));
    std::thread::sleep(Duration::from_millis(50));
    assert_eq!(a.got.lock().len(), 1);
}

#[test]
fn same_field_and_subscriber_replaces() {
    let rig = rig();
    let (_r, at) = rig.subscriber("lcu");
    let first = rig.hub.begin(rig.spec(&at, 0.5, 10)).unwrap();
    let second = rig.hub.begin(rig.spec(&at, 0.1, 10)).unwrap();
    assert_ne!(first, second);
    let active = rig.hub.active();
    assert_eq!(active.len(), 1);
    assert_eq!(active[0].0, second);
    assert_eq!(active[0].1.precision, 0.1);
}

#[test]
fn step_change_reported_within_twice_latency() {
    let rig = rig();
    let (r, at) = rig.subscriber("lcu");
    rig.hub.begin(rig.spec(&at, 0.5, 50)).unwrap();
    assert!(r.wait_for(|g| g.len() == 1, Duration::from_secs(1)));
    std::thread::sleep(Duration::from_millis(17));
    let t = Instant::now();
    rig.set(10.0);
    assert!(r.wait_for(|g| g.len() == 2, Duration::from_secs(1)));
    let at_report = r.got.lock()[1].0;
    let delay = at_report.duration_since(t);
    // Bound is 2 x latency; generous for a loaded machine.
    assert!(delay <= Duration::from_millis(100 + 50), "{delay:?}");
}

#[test]
fn sampling_happens_in_the_hub() {
    let rig = rig();
    let (_r, at) = rig.subscriber("lcu");
    rig.hub.begin(rig.spec(&at, 0.5, 10)).unwrap();
    std::thread::sleep(Duration::from_millis(200));
    assert!(rig.hub.samples_taken() >= 10);
    rig.hub.end_all();
    let n = rig.hub.samples_taken();
    std::thread::sleep(Duration::from_millis(50));
    assert_eq!(rig.hub.samples_taken(), n);
}

#[test]
fn text_fields_report_on_change_only() {
    let rig = rig();
    let (r, at) = rig.subscriber("lcu");
    let mut s = rig.spec(&at, 100.0, 5);
    s.field = "state".into();
    rig.hub.begin(s).unwrap();
    std::thread::sleep(Duration::from_millis(60));
    assert_eq!(r.got.lock().len(), 1);
    assert_eq!(r.got.lock()[0].1.value, FieldValue::Text("open".into()));
}

/// Independent oracle: the deadband rule stated directly.
fn replay(precision: f64, xs: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for &x in xs {
        let report = match out.last() {
            None => true,
            Some(&l) => x != l && (x - l).abs() >= precision,
        };
        if report {
            out.push(x);
        }
    }
    out
}

proptest! {
    #[test]
    fn filter_matches_replay(xs in prop::collection::vec(-100.0f64..100.0, 0..60), p in 0.0f64..20.0) {
        let samples: Vec<Sample<f64>> = xs.iter().copied().map(Sample::Number).collect();
        let got: Vec<f64> = filter_sequence(p, &samples)
            .into_iter()
            .map(|(s, _)| match s { Sample::Number(x) => x, _ => unreachable!() })
            .collect();
        prop_assert_eq!(got, replay(p, &xs));
    }

    #[test]
    fn precision_zero_reports_most_and_steps_respect_deadband(xs in prop::collection::vec(-10.0f64..10.0, 0..60), p in 0.0f64..5.0) {
        let samples: Vec<Sample<f64>> = xs.iter().copied().map(Sample::Number).collect();
        let out = filter_sequence(p, &samples);
        prop_assert!(filter_sequence(0.0, &samples).len() >= out.len());
        let vals: Vec<f64> = out.iter().map(|(s, _)| match s { Sample::Number(x) => *x, _ => unreachable!() }).collect();
        prop_assert!(vals.windows(2).all(|w| (w[1] - w[0]).abs() >= p && w[1] != w[0]));
    }

    #[test]
    fn first_report_initial_rest_change(xs in prop::collection::vec(0i32..5, 1..30)) {
        let samples: Vec<Sample<f32>> = xs.iter().map(|&x| Sample::Number(x as f32)).collect();
        let out = filter_sequence(1.0f32, &samples);
        prop_assert_eq!(out[0].1, ReportReason::Initial);
        prop_assert!(out[1..].iter().all(|(_, r)| *r == ReportReason::Change));
    }
}
