//! WebSocket message schema. See `docs/ws-protocol.md` at the repository root.

use iccs_core::services::Alert;
use iccs_core::statusmon::StatusReport;
use iccs_core::supervisory::Entry;
use iccs_core::{Error, ErrorCode};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Monitor parameters in a subscribe request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorParams {
    pub field: String,
    pub precision: f64,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ClientMessage {
    /// Exactly one of `mapper` and `monitor` is set.
    Subscribe {
        id: u64,
        target: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mapper: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        monitor: Option<MonitorParams>,
    },
    Unsubscribe {
        id: u64,
        subscription: u64,
    },
    Invoke {
        id: u64,
        target: String,
        method: String,
        #[serde(default)]
        args: Value,
    },
}

impl ClientMessage {
    pub fn id(&self) -> u64 {
        match self {
            ClientMessage::Subscribe { id, .. }
            | ClientMessage::Unsubscribe { id, .. }
            | ClientMessage::Invoke { id, .. } => *id,
        }
    }
}

/// Payload of an update push: a mapper record or a monitor report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Payload {
    Record(Vec<Entry>),
    Report(StatusReport),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ServerMessage {
    Result {
        id: u64,
        value: Value,
    },
    Error {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        id: Option<u64>,
        code: ErrorCode,
        message: String,
    },
    Update {
        subscription: u64,
        target: String,
        stream: String,
        seq: u64,
        #[serde(flatten)]
        payload: Payload,
    },
    Alert {
        alert: Alert,
    },
}

impl ServerMessage {
    pub fn error(id: Option<u64>, e: &Error) -> Self {
        ServerMessage::Error {
            id,
            code: e.code,
            message: e.message.clone(),
        }
    }

    pub fn reply(id: u64, r: iccs_core::Result<Value>) -> Self {
        match r {
            Ok(value) => ServerMessage::Result { id, value },
            Err(e) => ServerMessage::error(Some(id), &e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use iccs_core::FieldValue;
    use serde_json::json;

    #[test]
    fn subscribe_forms() {
        let m: ClientMessage =
            serde_json::from_value(json!({"kind": "subscribe", "id": 1, "target": "align_lcu", "mapper": "summary"}))
                .unwrap();
        assert_eq!(m.id(), 1);
        let m: ClientMessage = serde_json::from_value(json!({
            "kind": "subscribe", "id": 2, "target": "sensor_1",
            "monitor": {"field": "value", "precision": 0.01, "latency_ms": 50}
        }))
        .unwrap();
        assert!(matches!(m, ClientMessage::Subscribe { monitor: Some(_), .. }));
        assert!(serde_json::from_value::<ClientMessage>(json!({"kind": "subscribe", "id": 1, "target": "x", "extra": 1})).is_err());
    }

    #[test]
    fn update_keeps_entry_order() {
        let m = ServerMessage::Update {
            subscription: 4,
            target: "align_lcu".into(),
            stream: "summary".into(),
            seq: 2,
            payload: Payload::Record(vec![
                ("phase".into(), FieldValue::Text("idle".into())),
                ("best".into(), FieldValue::Number(0.5)),
            ]),
        };
        assert_eq!(
            serde_json::to_string(&m).unwrap(),
            r#"{"kind":"update","subscription":4,"target":"align_lcu","stream":"summary","seq":2,"record":[["phase","idle"],["best",0.5]]}"#
        );
    }

    #[test]
    fn error_shape() {
        let m = ServerMessage::reply(3, Err(Error::reserved("held by bob")));
        assert_eq!(
            serde_json::to_value(&m).unwrap(),
            json!({"kind": "error", "id": 3, "code": "RESERVED", "message": "held by bob"})
        );
    }
}
