use std::net::TcpStream;
use std::sync::Arc;
use std::time::{Duration, Instant};

use iccs_core::conduit::Client;
use iccs_core::kernel::{args, BootOptions, Configurable, Factory, ProcessTemplate, Scope};
use iccs_core::registry::{FacilityConfig, ProcessSpec};
use iccs_core::services::AlertSeverity;
use iccs_core::statusmon::{with_monitor_methods, MonitorHub, Sampler};
use iccs_core::supervisory::{with_lcu_methods, DataMapper, DeliveryPolicy, Lcu};
use iccs_core::sysman::{Central, InProcessLauncher, ProcState, SysmanOptions, TemplateSource};
use iccs_core::FieldValue;
use iccs_gateway::{
    CommandSpec, Display, FieldLayout, Gateway, GatewaySettings, PanelCatalog, PanelDescriptor, ServerMessage,
    StreamSpec, StyleTokens,
};
use parking_lot::Mutex;
use serde::Deserialize;
use serde_json::{json, Value};
use tungstenite::stream::MaybeTlsStream;
use tungstenite::{Message, WebSocket};

const HEARTBEAT: Duration = Duration::from_millis(200);

fn config() -> FacilityConfig {
    FacilityConfig::from_json(
        &json!({
            "facility_name": "gwtest",
            "sysman": {"host": "127.0.0.1", "port": 0},
            "processes": [
                {"name": "fep", "category": "fep", "endpoint": {"host": "127.0.0.1", "port": 0},
                 "objects": [
                    {"name": "meter", "scope": "distributed", "type_tag": "meter"},
                    {"name": "board", "scope": "distributed", "type_tag": "board"}
                 ]},
                {"name": "gw", "category": "gateway", "endpoint": {"host": "127.0.0.1", "port": 0}, "http_port": 0,
                 "objects": [{"name": "console_gw", "scope": "distributed", "type_tag": "gateway", "params": {"outbox_bound": 64}}]}
            ]
        })
        .to_string(),
    )
    .unwrap()
}

#[derive(Deserialize)]
struct SetArgs {
    value: f64,
    token: Option<String>,
}

fn devices() -> Factory {
    Factory::new(Scope::Distributed)
        .with("meter", |spec, ctx| {
            let fw = ctx.framework()?.clone();
            let value = Arc::new(Mutex::new(0.0f64));
            let v = value.clone();
            let sampler: Sampler = Arc::new(move |f: &str| (f == "value").then(|| FieldValue::Number(*v.lock())));
            let hub = MonitorHub::new(&spec.name, sampler, fw.sinks.clone());
            let name = spec.name.clone();
            let services = fw.hub();
            Ok(
                with_monitor_methods(Configurable::builder(&spec.name, "meter", Scope::Distributed), hub)
                    .method("set", move |a| {
                        let a: SetArgs = args(a)?;
                        services.check_reservation(&name, a.token.as_deref())?;
                        *value.lock() = a.value;
                        Ok(Value::Null)
                    })
                    .build(),
            )
        })
        .with("board", |spec, ctx| {
            let fw = ctx.framework()?.clone();
            let lcu = Lcu::new(
                &spec.name,
                0i64,
                vec![DataMapper::new("summary", |n: &i64| {
                    vec![
                        ("count".into(), FieldValue::Number(*n as f64)),
                        ("parity".into(), FieldValue::Text(if n % 2 == 0 { "even" } else { "odd" }.into())),
                    ]
                })],
                fw.sinks.clone(),
                DeliveryPolicy::default(),
                Some(fw.hub()),
            );
            let l = lcu.clone();
            Ok(
                with_lcu_methods(Configurable::builder(&spec.name, "board", Scope::Distributed), lcu)
                    .method("bump", move |_| {
                        l.evolve(|n| {
                            *n += 1;
                            Ok(())
                        })?;
                        Ok(Value::Null)
                    })
                    .build(),
            )
        })
}

fn panels() -> PanelCatalog {
    PanelCatalog::new()
        .with(PanelDescriptor {
            type_tag: "meter".into(),
            panel_kind: "gauge".into(),
            fields: vec![FieldLayout {
                name: "value".into(),
                display: Display::Gauge,
            }],
            commands: vec![CommandSpec {
                method: "set".into(),
                args: json!({"value": "number"}),
                requires_reservation: true,
            }],
            streams: vec![StreamSpec::Monitor {
                field: "value".into(),
                precision: 0.0,
                latency_ms: 10,
            }],
        })
        .with(PanelDescriptor {
            type_tag: "board".into(),
            panel_kind: "summary".into(),
            fields: vec![
                FieldLayout {
                    name: "count".into(),
                    display: Display::Number,
                },
                FieldLayout {
                    name: "parity".into(),
                    display: Display::Text,
                },
            ],
            commands: vec![CommandSpec {
                method: "bump".into(),
                args: json!({}),
                requires_reservation: false,
            }],
            streams: vec![StreamSpec::Mapper {
                mapper: "summary".into(),
            }],
        })
}

struct Facility {
    central: Arc<Central>,
    launcher: Arc<InProcessLauncher>,
    gateway: Arc<Gateway>,
    http: String,
}

impl Drop for Facility {
    fn drop(&mut self) {
        self.gateway.stop();
    }
}

fn facility() -> Facility {
    let templates = Arc::new(|spec: &ProcessSpec| {
        let devs = iccs_gateway::register(devices(), GatewaySettings {
            panels: panels(),
            ..GatewaySettings::default()
        });
        ProcessTemplate::new(spec.clone(), Factory::new(Scope::Local), devs)
    }) as TemplateSource;
    let launcher = Arc::new(InProcessLauncher::new(templates, BootOptions::default()));
    let central = Central::start(
        config(),
        SysmanOptions {
            heartbeat: HEARTBEAT,
            ..SysmanOptions::default()
        },
        Some(launcher.clone()),
    )
    .unwrap();
    central.launch().unwrap();
    let gateway = launcher
        .wait_handle("gw", Duration::from_secs(2))
        .unwrap()
        .object("console_gw")
        .unwrap()
        .instance::<Gateway>()
        .unwrap();
    let http = format!("http://{}", gateway.http_addr().unwrap());
    Facility {
        central,
        launcher,
        gateway,
        http,
    }
}

fn get(url: &str) -> (u16, Value) {
    match ureq::get(url).call() {
        Ok(r) => (r.status(), r.into_json().unwrap()),
        Err(ureq::Error::Status(code, r)) => (code, r.into_json().unwrap()),
        Err(e) => panic!("{url}: {e}"),
    }
}

struct Ws(WebSocket<MaybeTlsStream<TcpStream>>);

impl Ws {
    fn open(f: &Facility, operator: &str) -> Ws {
        let url = format!("{}/ws?operator={operator}", f.http.replace("http", "ws"));
        let (ws, _) = tungstenite::connect(url).unwrap();
        if let MaybeTlsStream::Plain(s) = ws.get_ref() {
            s.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
        }
        Ws(ws)
    }

    fn send(&mut self, v: Value) {
        self.0.send(Message::Text(v.to_string().into())).unwrap();
    }

    fn next(&mut self) -> Value {
        loop {
            match self.0.read().unwrap() {
                Message::Text(t) => return serde_json::from_str(&t).unwrap(),
                Message::Close(_) => panic!("closed"),
                _ => {}
            }
        }
    }

    /// Sends a request and returns its reply, keeping pushes that arrive in between.
    fn call(&mut self, v: Value, pushes: &mut Vec<Value>) -> Value {
        let id = v["id"].clone();
        self.send(v);
        loop {
            let m = self.next();
            if m.get("id") == Some(&id) {
                return m;
            }
            pushes.push(m);
        }
    }

    fn subscribe_board(&mut self, id: u64, pushes: &mut Vec<Value>) -> u64 {
        let r = self.call(
            json!({"kind": "subscribe", "id": id, "target": "board", "mapper": "summary"}),
            pushes,
        );
        assert_eq!(r["kind"], "result", "{r}");
        r["value"]["subscription"].as_u64().unwrap()
    }
}

fn remote(f: &Facility, name: &str) -> Client {
    Client::to_ref(f.central.registry().resolve(name).unwrap())
}

fn wait_until(timeout: Duration, mut ok: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        if ok() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(5));
    }
    ok()
}

#[test]
fn styles_and_panels_are_served() {
    let f = facility();
    let (code, styles) = get(&format!("{}/api/styles", f.http));
    assert_eq!(code, 200);
    assert_eq!(serde_json::from_value::<StyleTokens>(styles.clone()).unwrap(), StyleTokens::default());

    let mut changed = StyleTokens::default();
    changed.colors.insert("accent".into(), "#ff00ff".into());
    f.gateway.set_styles(changed.clone());
    let (_, after) = get(&format!("{}/api/styles", f.http));
    assert_ne!(after, styles);
    assert_eq!(after["colors"]["accent"], "#ff00ff");

    let (code, p) = get(&format!("{}/api/panels/meter", f.http));
    assert_eq!(code, 200);
    assert_eq!(p["panel_kind"], "gauge");
    assert_eq!(p["commands"][0]["requires_reservation"], true);
    let (code, e) = get(&format!("{}/api/panels/warp_drive", f.http));
    assert_eq!(code, 404);
    assert_eq!(e["code"], "NO_SUCH_OBJECT");
    let (_, tags) = get(&format!("{}/api/panels", f.http));
    assert_eq!(tags, json!(["board", "meter"]));

    let page = ureq::get(&format!("{}/", f.http)).call().unwrap().into_string().unwrap();
    assert!(page.contains("/api/styles"));
    assert!(!page.contains('#'), "placeholder page hardcodes a color");
}

#[test]
fn broadview_lists_processes_and_marks_failures() {
    let f = facility();
    let (code, b) = get(&format!("{}/api/broadview", f.http));
    assert_eq!(code, 200);
    assert_eq!(b["facility"], "gwtest");
    let procs = b["processes"].as_array().unwrap();
    assert_eq!(procs.len(), 2);
    assert_eq!(procs[0]["name"], "fep");
    assert_eq!(procs[0]["state"], "ready");
    let objs: Vec<&str> = procs[0]["objects"]
        .as_array()
        .unwrap()
        .iter()
        .map(|o| o["name"].as_str().unwrap())
        .collect();
    assert_eq!(objs, ["meter", "board"]);
    assert_eq!(procs[0]["objects"][0]["type_tag"], "meter");

    f.launcher.wait_handle("fep", Duration::from_secs(2)).unwrap().crash();
    assert!(f.central.wait_state("fep", ProcState::Failed, Duration::from_secs(2)));
    let (_, b) = get(&format!("{}/api/broadview", f.http));
    let fep = &b["processes"][0];
    assert_eq!(fep["state"], "failed");
    assert!(fep["objects"].as_array().unwrap().iter().all(|o| o["state"] == "failed"));
    assert!(fep["alerts"].as_u64().unwrap() >= 1);
}

#[test]
fn mapper_subscription_snapshot_then_updates_and_two_sessions_agree() {
    let f = facility();
    let mut a = Ws::open(&f, "alice");
    let mut b = Ws::open(&f, "bob");
    let (mut pa, mut pb) = (vec![], vec![]);
    let sa = a.subscribe_board(1, &mut pa);
    let sb = b.subscribe_board(1, &mut pb);
    assert_ne!(sa, sb);
    for i in 0..5 {
        let r = a.call(json!({"kind": "invoke", "id": 10 + i, "target": "board", "method": "bump"}), &mut pa);
        assert_eq!(r["kind"], "result");
    }
    while pa.len() < 6 {
        pa.push(a.next());
    }
    while pb.len() < 6 {
        pb.push(b.next());
    }
    assert_eq!(pa[0]["seq"], 1);
    assert_eq!(pa[0]["record"], json!([["count", 0.0], ["parity", "even"]]));
    let counts: Vec<f64> = pa.iter().map(|m| m["record"][0][1].as_f64().unwrap()).collect();
    assert_eq!(counts, [0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    let strip = |v: &Vec<Value>| -> Vec<String> {
        v.iter()
            .map(|m| {
                let mut m = m.clone();
                m.as_object_mut().unwrap().remove("subscription");
                m.to_string()
            })
            .collect()
    };
    assert_eq!(strip(&pa), strip(&pb));
    assert!(pa.iter().all(|m| m["subscription"] == sa && m["kind"] == "update"));

    let r = a.call(json!({"kind": "unsubscribe", "id": 30, "subscription": sa}), &mut pa);
    assert_eq!(r["kind"], "result");
    let r = a.call(json!({"kind": "unsubscribe", "id": 31, "subscription": sa}), &mut pa);
    assert_eq!(r["code"], "NO_SUCH_OBJECT");
}

#[test]
fn monitor_subscription_relays_reports() {
    let f = facility();
    let mut a = Ws::open(&f, "alice");
    let mut pushes = vec![];
    let r = a.call(
        json!({"kind": "subscribe", "id": 1, "target": "meter",
               "monitor": {"field": "value", "precision": 0.5, "latency_ms": 10}}),
        &mut pushes,
    );
    assert_eq!(r["kind"], "result", "{r}");
    let first = if pushes.is_empty() { a.next() } else { pushes.remove(0) };
    assert_eq!(first["kind"], "update");
    assert_eq!(first["report"]["reason"], "initial");
    assert_eq!(first["report"]["value"], 0.0);

    let r = a.call(json!({"kind": "invoke", "id": 2, "target": "__gateway", "method": "reserve", "args": {"device": "meter"}}), &mut pushes);
    assert_eq!(r["value"]["holder"], "alice");
    a.call(json!({"kind": "invoke", "id": 3, "target": "meter", "method": "set", "args": {"value": 3.0}}), &mut pushes);
    let m = if pushes.is_empty() { a.next() } else { pushes.remove(0) };
    assert_eq!(m["report"]["value"], 3.0);
    assert_eq!(m["report"]["reason"], "change");
    assert_eq!(m["stream"], "value");
}

#[test]
fn invoke_relays_errors_and_injects_reservation_token() {
    let f = facility();
    let mut a = Ws::open(&f, "alice");
    let mut b = Ws::open(&f, "bob");
    let mut p = vec![];
    let set = |id: u64| json!({"kind": "invoke", "id": id, "target": "meter", "method": "set", "args": {"value": 1.0}});
    assert_eq!(a.call(set(1), &mut p)["code"], "RESERVED");
    let r = a.call(json!({"kind": "invoke", "id": 2, "target": "meter", "method": "explode"}), &mut p);
    assert_eq!(r["code"], "NO_SUCH_METHOD");
    let r = a.call(json!({"kind": "subscribe", "id": 3, "target": "nowhere", "mapper": "summary"}), &mut p);
    assert_eq!(r["code"], "NO_SUCH_OBJECT");
    let r = a.call(json!({"kind": "invoke", "id": 4, "target": "nowhere", "method": "x"}), &mut p);
    assert_eq!(r["kind"], "error");

    let r = a.call(json!({"kind": "invoke", "id": 5, "target": "__gateway", "method": "reserve", "args": {"device": "meter"}}), &mut p);
    assert_eq!(r["kind"], "result");
    assert_eq!(a.call(set(6), &mut p)["kind"], "result");
    // Bob neither holds the device nor can take it.
    assert_eq!(b.call(set(7), &mut p)["code"], "RESERVED");
    let r = b.call(json!({"kind": "invoke", "id": 8, "target": "__gateway", "method": "reserve", "args": {"device": "meter"}}), &mut p);
    assert_eq!(r["code"], "RESERVED");
    // A forged token in the args does not help.
    let r = b.call(json!({"kind": "invoke", "id": 9, "target": "meter", "method": "set", "args": {"value": 2.0, "token": "forged"}}), &mut p);
    assert_eq!(r["code"], "RESERVED");
    a.call(json!({"kind": "invoke", "id": 10, "target": "__gateway", "method": "release", "args": {"device": "meter"}}), &mut p);
    let r = b.call(json!({"kind": "invoke", "id": 11, "target": "__gateway", "method": "reserve", "args": {"device": "meter"}}), &mut p);
    assert_eq!(r["kind"], "result");

    a.send(json!({"kind": "dance", "id": 12}));
    let e = a.next();
    assert_eq!(e["code"], "BAD_ARGS");
    assert_eq!(e["id"], 12);
    a.0.send(Message::Text("not json".into())).unwrap();
    let e = a.next();
    assert_eq!(e["code"], "BAD_ARGS");
    assert!(e.get("id").is_none());
}

#[test]
fn abrupt_close_cleans_up_within_a_heartbeat() {
    let f = facility();
    let mut a = Ws::open(&f, "alice");
    let mut p = vec![];
    a.subscribe_board(1, &mut p);
    a.call(json!({"kind": "subscribe", "id": 2, "target": "meter",
                  "monitor": {"field": "value", "precision": 0.1, "latency_ms": 10}}), &mut p);
    a.call(json!({"kind": "invoke", "id": 3, "target": "__gateway", "method": "reserve", "args": {"device": "meter"}}), &mut p);
    let board = remote(&f, "board");
    let meter = remote(&f, "meter");
    assert_eq!(board.invoke("subscriptions", Value::Null).unwrap().as_array().unwrap().len(), 1);
    assert_eq!(meter.invoke("monitors", Value::Null).unwrap().as_array().unwrap().len(), 1);
    assert_eq!(f.gateway.sessions().len(), 1);

    // Drop the TCP connection without a close handshake.
    if let MaybeTlsStream::Plain(s) = a.0.get_ref() {
        s.shutdown(std::net::Shutdown::Both).unwrap();
    }
    drop(a);
    let t = Instant::now();
    assert!(wait_until(HEARTBEAT, || {
        f.gateway.sessions().is_empty()
            && board.invoke("subscriptions", Value::Null).unwrap().as_array().unwrap().is_empty()
            && meter.invoke("monitors", Value::Null).unwrap().as_array().unwrap().is_empty()
            && f.central.services().reservations.list().is_empty()
    }), "leftovers after {:?}", t.elapsed());
}

#[test]
fn slow_session_is_disconnected() {
    let f = facility();
    // Opened directly: nobody drains this outbox.
    let (id, _rx) = f.gateway.open_session("sleepy");
    f.gateway.handle(
        id,
        serde_json::from_value(json!({"kind": "subscribe", "id": 1, "target": "board", "mapper": "summary"})).unwrap(),
    );
    let board = remote(&f, "board");
    for _ in 0..80 {
        board.invoke("bump", Value::Null).unwrap();
    }
    assert!(wait_until(Duration::from_secs(2), || f.gateway.sessions().is_empty()));
    assert!(wait_until(Duration::from_secs(2), || board
        .invoke("subscriptions", Value::Null)
        .unwrap()
        .as_array()
        .unwrap()
        .is_empty()));
}

#[test]
fn alerts_fan_out_and_acknowledge() {
    let f = facility();
    let mut a = Ws::open(&f, "alice");
    let mut b = Ws::open(&f, "bob");
    let mut p = vec![];
    // A round trip makes sure both sessions are registered.
    a.call(json!({"kind": "invoke", "id": 1, "target": "__gateway", "method": "whoami"}), &mut p);
    b.call(json!({"kind": "invoke", "id": 1, "target": "__gateway", "method": "whoami"}), &mut p);
    let id = f
        .central
        .services()
        .events
        .raise_alert("overheat", "meter", json!({"t": 80}), AlertSeverity::Warning);
    let ma = a.next();
    let mb = b.next();
    assert_eq!(ma["kind"], "alert");
    assert_eq!(ma, mb);
    assert_eq!(ma["alert"]["id"], id);
    let r = a.call(json!({"kind": "invoke", "id": 2, "target": "__gateway", "method": "acknowledge", "args": {"alert": id}}), &mut p);
    assert_eq!(r["value"]["state"], "acknowledged");
    // The acknowledgement reaches the other console too.
    let mb = b.next();
    assert_eq!(mb["alert"]["state"], "acknowledged");
    assert_eq!(mb["alert"]["acked_by"], "alice");
    let r = b.call(json!({"kind": "invoke", "id": 3, "target": "__gateway", "method": "alerts"}), &mut p);
    assert_eq!(r["value"], json!([]));
}

#[test]
fn operator_is_required() {
    let f = facility();
    let url = format!("{}/ws", f.http.replace("http", "ws"));
    assert!(tungstenite::connect(url).is_err());
}

#[test]
fn server_message_round_trip() {
    let m: ServerMessage = serde_json::from_value(json!({"kind": "result", "id": 1, "value": null})).unwrap();
    assert_eq!(m, ServerMessage::Result { id: 1, value: Value::Null });
}
