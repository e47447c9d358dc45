use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{is_name_token, Error, Result};

const SCHEME: &str = "ref://";

/// Location-transparent handle to a named distributed object.
///
/// Canonical text form: `ref://<host>:<port>/<process>/<object>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObjectRef {
    pub host: String,
    pub port: u16,
    pub process: String,
    pub object: String,
}

impl ObjectRef {
    pub fn new(
        host: impl Into<String>,
        port: u16,
        process: impl Into<String>,
        object: impl Into<String>,
    ) -> Result<Self> {
        let r = ObjectRef {
            host: host.into(),
            port,
            process: process.into(),
            object: object.into(),
        };
        r.validate()?;
        Ok(r)
    }

    fn validate(&self) -> Result<()> {
        if !is_name_token(&self.host) {
            return Err(Error::bad_args(format!("bad host {:?}", self.host)));
        }
        if self.port == 0 {
            return Err(Error::bad_args("port must be in 1..=65535"));
        }
        if !is_name_token(&self.process) {
            return Err(Error::bad_args(format!("bad process name {:?}", self.process)));
        }
        if !is_name_token(&self.object) {
            return Err(Error::bad_args(format!("bad object name {:?}", self.object)));
        }
        Ok(())
    }

    /// `host:port`, suitable for `TcpStream::connect`.
    pub fn addr(&self) -> String {
        format!("{}:{}", self.host, self.port)
    }

    /// Same endpoint, different object.
    pub fn with_object(&self, object: &str) -> Result<Self> {
        ObjectRef::new(self.host.clone(), self.port, self.process.clone(), object)
    }
}

pub fn parse_ref(text: &str) -> Result<ObjectRef> {
    text.parse()
}

pub fn format_ref(r: &ObjectRef) -> String {
    r.to_string()
}

impl FromStr for ObjectRef {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let malformed = || Error::bad_args(format!("malformed object reference {text:?}"));
        let rest = text.strip_prefix(SCHEME).ok_or_else(malformed)?;
        let mut parts = rest.split('/');
        let (endpoint, process, object) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some(e), Some(p), Some(o), None) => (e, p, o),
            _ => return Err(malformed()),
        };
        let (host, port) = endpoint.rsplit_once(':').ok_or_else(malformed)?;
        if port.is_empty() || !port.bytes().all(|b| b.is_ascii_digit()) {
            return Err(malformed());
        }
        let port: u16 = port.parse().map_err(|_| malformed())?;
        ObjectRef::new(host, port, process, object).map_err(|e| {
            Error::bad_args(format!("malformed object reference {text:?}: {}", e.message))
        })
    }
}

impl fmt::Display for ObjectRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{SCHEME}{}:{}/{}/{}",
            self.host, self.port, self.process, self.object
        )
    }
}

impl Serialize for ObjectRef {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ObjectRef {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
