mod common;

use std::process::Command;
use std::time::Duration;

use common::{wait_until, Demo, Knobs};
use iccs_core::conduit::Client;
use iccs_core::sysman::ProcState;
use iccs_core::ErrorCode;
use iccs_facility::actuator::MOVE_COMPLETE;
use iccs_facility::alignment::{DONE_EVENT, PROBE_EVENT};
use iccs_facility::demo_panels;
use serde_json::{json, Value};

#[test]
fn only_distributed_objects_are_reachable() {
    let d = Demo::launch(&Knobs::default());
    for p in ["fep_align", "fep_diag", "supervisor_align", "gateway"] {
        assert_eq!(d.central.state_of(p), Some(ProcState::Ready), "{p}");
    }
    let names: Vec<String> = d.central.registry().entries().into_iter().map(|e| e.object).collect();
    for n in ["actuator_A", "actuator_B", "shutter_1", "sensor_1", "alignment", "console_gw"] {
        assert!(names.contains(&n.to_string()), "{n} not in {names:?}");
    }
    for local in ["axis_1", "axis_4", "shutter_drive_1", "clock_a"] {
        assert!(d.central.registry().resolve(local).is_err(), "{local}");
    }
    // Asking the hosting process directly does not expose a controller either.
    let act = d.central.registry().resolve("actuator_A").unwrap();
    let e = Client::to_ref(act.with_object("axis_1").unwrap())
        .invoke("status", Value::Null)
        .unwrap_err();
    assert_eq!(e.code, ErrorCode::NoSuchObject);
}

#[test]
fn actuator_commands_over_the_wire() {
    let d = Demo::launch(&Knobs::default());
    let act = d.client("actuator_B");
    let e = act.invoke("move_to", json!({"targets": [1.0, 1.0]})).unwrap_err();
    assert_eq!(e.code, ErrorCode::Reserved);

    let r = d.central.services().reservations.reserve("actuator_B", "op").unwrap();
    let e = act
        .invoke("move_to", json!({"targets": [1.0, 6.0], "token": r.token}))
        .unwrap_err();
    assert_eq!(e.code, ErrorCode::OutOfRange);
    let e = act.invoke("move_to", json!({"targets": [1.0], "token": r.token})).unwrap_err();
    assert_eq!(e.code, ErrorCode::BadArgs);
    assert_eq!(act.invoke("positions", Value::Null).unwrap(), json!([0.0, 0.0]));

    act.invoke("move_to", json!({"targets": [0.3, -0.2], "token": r.token})).unwrap();
    assert!(wait_until(Duration::from_secs(5), || {
        act.invoke("positions", Value::Null).unwrap() == json!([0.3, -0.2])
    }));
    assert!(wait_until(Duration::from_secs(2), || {
        !d.central.services().events.query(0, Some(MOVE_COMPLETE)).is_empty()
    }));
    let ev = d.central.services().events.query(0, Some(MOVE_COMPLETE));
    assert_eq!(ev[0].source, "actuator_B");
    assert_eq!(ev[0].payload["positions"], json!([0.3, -0.2]));

    let other = d.central.services().reservations.reserve("actuator_B", "op2");
    assert_eq!(other.unwrap_err().code, ErrorCode::Reserved);
}

#[test]
fn closed_shutter_blanks_the_sensor() {
    let d = Demo::launch(&Knobs::default());
    let sensor = d.client("sensor_1");
    let shutter = d.client("shutter_1");
    // The sensor learns the actuator's positions through its own monitors.
    assert!(wait_until(Duration::from_secs(5), || {
        sensor.invoke("sample", Value::Null).unwrap()["positions"] == json!([0.5, -0.5])
    }));
    let open = sensor.invoke("read", Value::Null).unwrap().as_f64().unwrap();
    assert!((open - (-0.5f64).exp()).abs() <= 0.01 + 1e-12, "{open}");

    let r = d.central.services().reservations.reserve("shutter_1", "op").unwrap();
    assert_eq!(
        shutter.invoke("close", Value::Null).unwrap_err().code,
        ErrorCode::Reserved
    );
    shutter.invoke("close", json!({"token": r.token})).unwrap();
    assert!(wait_until(Duration::from_secs(3), || {
        shutter.invoke("state", Value::Null).unwrap() == json!("closed")
    }));
    assert_eq!(sensor.invoke("read", Value::Null).unwrap(), json!(0.0));
}

#[test]
fn alignment_through_the_lcu() {
    let d = Demo::launch(&Knobs {
        rate: 20.0,
        eta: 0.0,
        ..Knobs::default()
    });
    let lcu = d.client("alignment");
    let r = lcu.invoke("align", json!({"threshold": 0.9, "max_iters": 200})).unwrap();
    assert_eq!(r["phase"], "aligning");
    let again = lcu.invoke("align", json!({"threshold": 0.9, "max_iters": 200})).unwrap_err();
    assert_eq!(again.code, ErrorCode::AppError);
    let s = lcu.invoke("wait", json!({"timeout_ms": 30000})).unwrap();
    assert_eq!(s["phase"], "aligned", "{s}");
    assert!(s["best"].as_f64().unwrap() >= 0.9);

    // Probe events travel on the asynchronous service queue.
    let n = s["iteration"].as_u64().unwrap() as usize;
    assert!(wait_until(Duration::from_secs(3), || {
        d.central.services().events.query(0, Some(PROBE_EVENT)).len() == n
    }));
    assert_eq!(d.central.services().events.query(0, Some(DONE_EVENT)).len(), 1);
    assert!(d.central.services().reservations.holder("actuator_A").is_none());

    // The sensor agrees with the LCU's final reading.
    let sample = d.client("sensor_1").invoke("sample", Value::Null).unwrap();
    assert_eq!(sample["value"], s["best"]);

    assert_eq!(lcu.invoke("status", Value::Null).unwrap()["phase"], "aligned");
    assert_eq!(lcu.invoke("reset", Value::Null).unwrap()["phase"], "idle");
}

#[test]
fn alignment_fails_cleanly_when_the_actuator_is_held() {
    let d = Demo::launch(&Knobs::default());
    let held = d.central.services().reservations.reserve("actuator_A", "someone").unwrap();
    let lcu = d.client("alignment");
    let e = lcu.invoke("align", json!({"threshold": 0.9, "max_iters": 10})).unwrap_err();
    assert_eq!(e.code, ErrorCode::Reserved);
    assert_eq!(lcu.invoke("status", Value::Null).unwrap()["phase"], "fault");
    assert_eq!(
        lcu.invoke("align", json!({"threshold": 2.0, "max_iters": 10})).unwrap_err().code,
        ErrorCode::BadArgs
    );
    d.central.services().reservations.release(&held.token).unwrap();
}

#[test]
fn panel_commands_exist_on_their_objects() {
    let d = Demo::launch(&Knobs::default());
    let objects = [
        ("actuator", "actuator_A"),
        ("shutter", "shutter_1"),
        ("sensor", "sensor_1"),
        ("alignment_lcu", "alignment"),
    ];
    let panels = demo_panels();
    assert_eq!(panels.iter().count(), objects.len());
    for (tag, name) in objects {
        let p = panels.get(tag).unwrap();
        let c = d.client(name);
        for cmd in &p.commands {
            // A deliberately wrong argument: anything but NO_SUCH_METHOD means the method exists.
            if let Err(e) = c.invoke(&cmd.method, json!({"__probe": true})) {
                assert_ne!(e.code, ErrorCode::NoSuchMethod, "{name}.{}", cmd.method);
            }
        }
    }
}

fn iccs(d: &Demo, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_iccs"))
        .arg("--sysman")
        .arg(d.central.registry_ref().addr())
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .unwrap()
}

#[test]
fn cli_ctl_watch_and_inject() {
    let d = Demo::launch(&Knobs::default());
    let out = iccs(&d, &["ctl", "actuator_A", "positions"]);
    assert!(out.status.success(), "{out:?}");
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v, json!([0.5, -0.5]));

    let out = iccs(&d, &["ctl", "actuator_A", "move_to", r#"{"targets":[0,0]}"#]);
    assert_eq!(out.status.code(), Some(1));
    let e: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(e["code"], "RESERVED");

    let out = iccs(&d, &["ctl", "nothing_here", "status"]);
    assert_eq!(out.status.code(), Some(1));
    let e: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(e["code"].is_string());

    let out = iccs(
        &d,
        &["watch", "actuator_A", "position_0", "--precision", "0.01", "--latency", "20", "--count", "1"],
    );
    assert!(out.status.success(), "{out:?}");
    let line = String::from_utf8(out.stdout).unwrap();
    let report: Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    assert_eq!(report["device"], "actuator_A");
    assert_eq!(report["field"], "position_0");
    assert_eq!(report["value"], json!(0.5));
    assert_eq!(report["reason"], "initial");

    let out = iccs(&d, &["inject", "fep_diag", r#"{"crash":true}"#]);
    assert!(out.status.success(), "{out:?}");
    assert!(d.central.wait_state("fep_diag", ProcState::Failed, Duration::from_secs(3)));
    assert!(d.central.registry().resolve("sensor_1").is_err());

    let out = iccs(&d, &["inject", "fep_align", "not json"]);
    assert_eq!(out.status.code(), Some(1));
}
