use std::collections::HashSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use iccs_core::conduit::ConnectionPolicy;
use iccs_core::registry::FacilityConfig;
use iccs_core::services::{AlertSeverity, AlertState, ServiceHub, ServicesClient, Severity};
use iccs_core::sysman::{Central, SysmanOptions};
use iccs_core::ErrorCode;
use serde_json::json;

fn central() -> Arc<Central> {
    let cfg = FacilityConfig::from_json(r#"{"facility_name":"svc","sysman":{"host":"127.0.0.1","port":0}}"#).unwrap();
    Central::start(cfg, SysmanOptions::default(), None).unwrap()
}

#[test]
fn contended_reservations_have_one_holder_at_a_time() {
    let c = central();
    let inside = Arc::new(AtomicUsize::new(0));
    let wins = Arc::new(AtomicUsize::new(0));
    let hs: Vec<_> = (0..8)
        .map(|i| {
            let (sysman, inside, wins) = (c.sysman_ref(), inside.clone(), wins.clone());
            thread::spawn(move || {
                let svc = ServicesClient::new(&sysman, ConnectionPolicy::default()).unwrap();
                let mut tokens = HashSet::new();
                for _ in 0..30 {
                    match svc.reserve("shutter", &format!("op{i}")) {
                        Ok(r) => {
                            assert_eq!(inside.fetch_add(1, Ordering::SeqCst), 0, "two holders");
                            assert!(tokens.insert(r.token.clone()), "token reused");
                            thread::sleep(Duration::from_millis(1));
                            inside.fetch_sub(1, Ordering::SeqCst);
                            wins.fetch_add(1, Ordering::SeqCst);
                            svc.release(&r.token).unwrap();
                        }
                        Err(e) => assert_eq!(e.code, ErrorCode::Reserved),
                    }
                }
            })
        })
        .collect();
    for h in hs {
        h.join().unwrap();
    }
    assert!(wins.load(Ordering::SeqCst) > 0);
    assert!(c.services().reservations.list().is_empty());
}

#[test]
fn release_with_unknown_token_is_bad_args() {
    let c = central();
    let svc = ServicesClient::new(&c.sysman_ref(), ConnectionPolicy::default()).unwrap();
    let r = svc.reserve("axis", "alice").unwrap();
    assert_eq!(svc.reserve("axis", "bob").unwrap_err().code, ErrorCode::Reserved);
    // Same holder renews and keeps the token.
    assert_eq!(svc.reserve("axis", "alice").unwrap().token, r.token);
    assert_eq!(svc.release("nope").unwrap_err().code, ErrorCode::BadArgs);
    svc.release(&r.token).unwrap();
    svc.reserve("axis", "bob").unwrap();
}

#[test]
fn log_events_and_alerts_round_trip() {
    let c = central();
    let svc = ServicesClient::new(&c.sysman_ref(), ConnectionPolicy::default()).unwrap();
    svc.log("fep_x", Severity::Warning, "hot");
    svc.log("fep_x", Severity::Debug, "noise");
    svc.raise_alert("overtemp", "fep_x", json!({"t": 90}), AlertSeverity::Warning);
    let id = svc.emit_now("moved", "fep_x", json!({"to": 3})).unwrap();
    // Fire-and-forget calls share one ordered queue; wait for it to drain.
    let mut tries = 0;
    while svc.alerts(None).unwrap().is_empty() && tries < 100 {
        thread::sleep(Duration::from_millis(10));
        tries += 1;
    }
    let warn = svc.query_log(Severity::Warning, 0).unwrap();
    assert!(warn.iter().any(|r| r.text == "hot"));
    assert!(warn.iter().all(|r| r.severity >= Severity::Warning));
    let ev = svc.query_events(0, Some("moved")).unwrap();
    assert_eq!(ev.len(), 1);
    assert_eq!(ev[0].seq, id);
    let alerts = svc.alerts(Some(AlertState::Raised)).unwrap();
    assert_eq!(alerts.len(), 1);
    let acked = svc.acknowledge(alerts[0].id, "op1").unwrap();
    assert_eq!(acked.state, AlertState::Acknowledged);
    assert_eq!(acked.acked_by.as_deref(), Some("op1"));
    assert!(svc.alerts(Some(AlertState::Raised)).unwrap().is_empty());
    assert_eq!(svc.acknowledge(999, "op1").unwrap_err().code, ErrorCode::NoSuchObject);
}
