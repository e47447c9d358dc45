use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use crate::error::{is_name_token, Error, Result};

/// One framed request or reply.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub id: u64,
    pub body: Body,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    Call {
        object: String,
        method: String,
        args: Value,
    },
    Reply(Result<Value>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Kind {
    Call,
    Reply,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Status {
    Ok,
    Error,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Wire {
    id: u64,
    kind: Kind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    object: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    method: Option<String>,
    #[serde(default, deserialize_with = "present", skip_serializing_if = "Option::is_none")]
    args: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    status: Option<Status>,
    #[serde(default, deserialize_with = "present", skip_serializing_if = "Option::is_none")]
    value: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<Error>,
}

// A JSON `null` is a present value, not an absent field.
fn present<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<Value>, D::Error> {
    Value::deserialize(d).map(Some)
}

impl Envelope {
    pub fn call(id: u64, object: impl Into<String>, method: impl Into<String>, args: Value) -> Self {
        Envelope {
            id,
            body: Body::Call {
                object: object.into(),
                method: method.into(),
                args,
            },
        }
    }

    pub fn reply(id: u64, result: Result<Value>) -> Self {
        Envelope {
            id,
            body: Body::Reply(result),
        }
    }

    pub fn is_call(&self) -> bool {
        matches!(self.body, Body::Call { .. })
    }

    pub fn to_json(&self) -> Vec<u8> {
        let wire = match &self.body {
            Body::Call {
                object,
                method,
                args,
            } => Wire {
                id: self.id,
                kind: Kind::Call,
                object: Some(object.clone()),
                method: Some(method.clone()),
                args: Some(args.clone()),
                status: None,
                value: None,
                error: None,
            },
            Body::Reply(Ok(v)) => Wire {
                id: self.id,
                kind: Kind::Reply,
                object: None,
                method: None,
                args: None,
                status: Some(Status::Ok),
                value: Some(v.clone()),
                error: None,
            },
            Body::Reply(Err(e)) => Wire {
                id: self.id,
                kind: Kind::Reply,
                object: None,
                method: None,
                args: None,
                status: Some(Status::Error),
                value: None,
                error: Some(e.clone()),
            },
        };
        serde_json::to_vec(&wire).expect("envelope serialization cannot fail")
    }

    /// Parses and checks that exactly the field group implied by `kind` is present.
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let w: Wire = serde_json::from_slice(bytes)
            .map_err(|e| Error::bad_args(format!("malformed envelope: {e}")))?;
        let body = match w.kind {
            Kind::Call => {
                if w.status.is_some() || w.value.is_some() || w.error.is_some() {
                    return Err(Error::bad_args("call envelope carries reply fields"));
                }
                match (w.object, w.method, w.args) {
                    (Some(object), Some(method), Some(args)) => {
                        if !is_name_token(&object) || !is_name_token(&method) {
                            return Err(Error::bad_args("call names must be name tokens"));
                        }
                        Body::Call {
                            object,
                            method,
                            args,
                        }
                    }
                    _ => return Err(Error::bad_args("call envelope missing object/method/args")),
                }
            }
            Kind::Reply => {
                if w.object.is_some() || w.method.is_some() || w.args.is_some() {
                    return Err(Error::bad_args("reply envelope carries call fields"));
                }
                match (w.status, w.value, w.error) {
                    (Some(Status::Ok), Some(v), None) => Body::Reply(Ok(v)),
                    (Some(Status::Error), None, Some(e)) => Body::Reply(Err(e)),
                    _ => return Err(Error::bad_args("reply envelope has inconsistent status")),
                }
            }
        };
        Ok(Envelope { id: w.id, body })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::ErrorCode;
    use serde_json::json;

    #[test]
    fn call_wire_shape() {
        let e = Envelope::call(7, "actuator_A", "move_to", json!({"targets": [1.0]}));
        let text = String::from_utf8(e.to_json()).unwrap();
        assert_eq!(
            text,
            r#"{"id":7,"kind":"call","object":"actuator_A","method":"move_to","args":{"targets":[1.0]}}"#
        );
        assert_eq!(Envelope::from_json(text.as_bytes()).unwrap(), e);
    }

    #[test]
    fn reply_with_null_value_keeps_value_field() {
        let e = Envelope::reply(3, Ok(Value::Null));
        let text = String::from_utf8(e.to_json()).unwrap();
        assert_eq!(text, r#"{"id":3,"kind":"reply","status":"ok","value":null}"#);
        assert_eq!(Envelope::from_json(text.as_bytes()).unwrap(), e);
    }

    #[test]
    fn error_reply_round_trips() {
        let e = Envelope::reply(9, Err(Error::reserved("held")));
        let text = String::from_utf8(e.to_json()).unwrap();
        assert_eq!(
            text,
            r#"{"id":9,"kind":"reply","status":"error","error":{"code":"RESERVED","message":"held"}}"#
        );
        assert_eq!(Envelope::from_json(text.as_bytes()).unwrap(), e);
    }

    #[test]
    fn mixed_field_groups_rejected() {
        for bad in [
            r#"{"id":1,"kind":"call","object":"o","method":"m","args":{},"status":"ok"}"#,
            r#"{"id":1,"kind":"reply","status":"ok","value":1,"method":"m"}"#,
            r#"{"id":1,"kind":"reply","status":"ok"}"#,
            r#"{"id":1,"kind":"reply","status":"error","value":1}"#,
            r#"{"id":1,"kind":"call","object":"o","method":"m"}"#,
            r#"{"id":1,"kind":"call","object":"o o","method":"m","args":null}"#,
            r#"{"id":1,"kind":"other"}"#,
            r#"{"id":1,"kind":"call","object":"o","method":"m","args":{},"extra":1}"#,
            r#"not json"#,
        ] {
            assert_eq!(Envelope::from_json(bad.as_bytes()).unwrap_err().code, ErrorCode::BadArgs, "{bad}");
        }
    }
}
