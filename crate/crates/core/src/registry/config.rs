use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{is_name_token, Error, Result};
use crate::kernel::Scope;

pub const DEFAULT_WORKER_COUNT: usize = 4;

/// Params key under which a device lists the controllers it binds.
pub const CONTROLLERS_PARAM: &str = "controllers";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Fep,
    Supervisor,
    Gateway,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoint {
    pub host: String,
    /// 0 means "any free port"; the actual port is published at start-up.
    pub port: u16,
}

impl Default for Endpoint {
    fn default() -> Self {
        Endpoint {
            host: "127.0.0.1".into(),
            port: 7000,
        }
    }
}

impl Endpoint {
    pub fn addr(&self) -> String {
        format!("{}:{}", self.host, self.port)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub name: String,
    pub scope: Scope,
    pub type_tag: String,
    #[serde(default)]
    pub params: Value,
}

impl ObjectSpec {
    /// Controller names listed under `params.controllers`.
    pub fn controller_bindings(&self) -> Vec<String> {
        self.params
            .get(CONTROLLERS_PARAM)
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(|v| v.as_str().map(str::to_string)).collect())
            .unwrap_or_default()
    }
}

fn default_workers() -> usize {
    DEFAULT_WORKER_COUNT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessSpec {
    pub name: String,
    pub category: Category,
    pub endpoint: Endpoint,
    #[serde(default = "default_workers")]
    pub worker_count: usize,
    /// Selects the factory set when one binary hosts several process variants.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    /// HTTP port for gateway processes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub http_port: Option<u16>,
    #[serde(default)]
    pub objects: Vec<ObjectSpec>,
}

/// The configuration-server database.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FacilityConfig {
    pub facility_name: String,
    /// Where the system manager (and the name service inside it) listens.
    #[serde(default)]
    pub sysman: Endpoint,
    #[serde(default)]
    pub processes: Vec<ProcessSpec>,
}

pub fn load_config(path: impl AsRef<Path>) -> Result<FacilityConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::bad_args(format!("cannot read {}: {e}", path.display())))?;
    FacilityConfig::from_json(&text)
}

impl FacilityConfig {
    pub fn from_json(text: &str) -> Result<FacilityConfig> {
        let cfg: FacilityConfig =
            serde_json::from_str(text).map_err(|e| Error::bad_args(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn process(&self, name: &str) -> Option<&ProcessSpec> {
        self.processes.iter().find(|p| p.name == name)
    }

    /// Returns the first violated invariant as BAD_ARGS.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::bad_args(m));
        let mut procs = HashSet::new();
        let mut endpoints: HashSet<(String, u16)> = HashSet::new();
        let mut exported: HashMap<&str, &str> = HashMap::new();
        if self.sysman.port != 0 {
            endpoints.insert((self.sysman.host.clone(), self.sysman.port));
        }
        for p in &self.processes {
            if !is_name_token(&p.name) {
                return bad(format!("invalid process name {:?}", p.name));
            }
            if !procs.insert(p.name.as_str()) {
                return bad(format!("duplicate process {:?}", p.name));
            }
            if !is_name_token(&p.endpoint.host) {
                return bad(format!("process {}: invalid host {:?}", p.name, p.endpoint.host));
            }
            if p.endpoint.port != 0 && !endpoints.insert((p.endpoint.host.clone(), p.endpoint.port)) {
                return bad(format!("process {}: duplicate endpoint {}", p.name, p.endpoint.addr()));
            }
            if p.worker_count == 0 {
                return bad(format!("process {}: worker_count must be at least 1", p.name));
            }
            let mut local = HashSet::new();
            let mut names = HashSet::new();
            for o in &p.objects {
                if !is_name_token(&o.name) || o.name.starts_with("__") {
                    return bad(format!("process {}: invalid object name {:?}", p.name, o.name));
                }
                if !is_name_token(&o.type_tag) {
                    return bad(format!("object {}: invalid type_tag {:?}", o.name, o.type_tag));
                }
                if !names.insert(o.name.as_str()) {
                    return bad(format!("process {}: duplicate object {:?}", p.name, o.name));
                }
                match o.scope {
                    Scope::Local => {
                        local.insert(o.name.as_str());
                    }
                    Scope::Distributed => {
                        if let Some(other) = exported.insert(&o.name, &p.name) {
                            return bad(format!(
                                "distributed object {:?} declared by both {other} and {}",
                                o.name, p.name
                            ));
                        }
                    }
                }
            }
            for o in &p.objects {
                if let Some(list) = o.params.get(CONTROLLERS_PARAM) {
                    let Some(list) = list.as_array() else {
                        return bad(format!("object {}: controllers must be a list", o.name));
                    };
                    for c in list {
                        let Some(c) = c.as_str() else {
                            return bad(format!("object {}: controller names must be strings", o.name));
                        };
                        if !local.contains(c) {
                            return bad(format!(
                                "object {} binds missing controller {c:?} in process {}",
                                o.name, p.name
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// True if `name` is declared with local scope anywhere in the facility.
    pub fn is_local_name(&self, name: &str) -> bool {
        self.processes
            .iter()
            .flat_map(|p| &p.objects)
            .any(|o| o.name == name && o.scope == Scope::Local)
    }
}
