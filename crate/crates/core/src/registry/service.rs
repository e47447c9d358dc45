use std::sync::Arc;
use std::time::Duration;

use parking_lot::RwLock;
use serde::Deserialize;
use serde_json::{json, Value};

use super::config::{FacilityConfig, ObjectSpec};
use super::names::{NameEntry, NameTable};
use crate::conduit::{Client, ConnectionPolicy, ObjectRef, Resolver, Target};
use crate::error::{check_name_token, Error, Result};
use crate::kernel::{args, reply, Configurable, Scope};

/// Distributed name of the name service.
pub const REGISTRY_OBJECT: &str = "__registry";

/// The configuration framework: name table plus the facility database.
#[derive(Default)]
pub struct Registry {
    names: NameTable,
    config: RwLock<Option<FacilityConfig>>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_config(config: FacilityConfig) -> Self {
        Registry {
            names: NameTable::new(),
            config: RwLock::new(Some(config)),
        }
    }

    pub fn load(&self, config: FacilityConfig) {
        *self.config.write() = Some(config);
    }

    pub fn config(&self) -> Option<FacilityConfig> {
        self.config.read().clone()
    }

    pub fn names(&self) -> &NameTable {
        &self.names
    }

    pub fn register(&self, object: &str, object_ref: ObjectRef) -> Result<()> {
        check_name_token("object", object)?;
        if let Some(cfg) = self.config.read().as_ref() {
            if cfg.is_local_name(object) {
                return Err(Error::bad_args(format!(
                    "{object:?} is a local configurable and cannot be exported"
                )));
            }
        }
        self.names.register(object, object_ref);
        Ok(())
    }

    pub fn resolve(&self, object: &str) -> Result<ObjectRef> {
        self.names.resolve(object)
    }

    pub fn wait_for(&self, object: &str, timeout: Duration) -> Result<ObjectRef> {
        self.names.wait_for(object, timeout)
    }

    pub fn manifest_for(&self, process: &str) -> Result<Vec<ObjectSpec>> {
        let cfg = self.config.read();
        cfg.as_ref()
            .and_then(|c| c.process(process))
            .map(|p| p.objects.clone())
            .ok_or_else(|| Error::no_such_object(format!("no process {process:?} in configuration")))
    }

    pub fn remove_process(&self, process: &str) -> Vec<String> {
        self.names.remove_process(process)
    }

    pub fn entries(&self) -> Vec<NameEntry> {
        self.names.entries()
    }
}

impl Resolver for Registry {
    fn resolve(&self, name: &str, _timeout: Duration) -> Result<ObjectRef> {
        Registry::resolve(self, name)
    }
}

#[derive(Deserialize)]
struct RegisterArgs {
    object: String,
    #[serde(rename = "ref")]
    object_ref: ObjectRef,
}

#[derive(Deserialize)]
struct ObjectArg {
    object: String,
}

#[derive(Deserialize)]
struct WaitArgs {
    object: String,
    timeout_ms: u64,
}

#[derive(Deserialize)]
struct ProcessArg {
    process: String,
}

/// Exposes a [`Registry`] as the `__registry` distributed object.
pub fn registry_object(registry: Arc<Registry>) -> Configurable {
    let r1 = registry.clone();
    let r2 = registry.clone();
    let r3 = registry.clone();
    let r4 = registry.clone();
    let r5 = registry.clone();
    let r6 = registry.clone();
    let r7 = registry;
    Configurable::builder(REGISTRY_OBJECT, "registry", Scope::Distributed)
        .concurrent("register", move |v| {
            let a: RegisterArgs = args(v)?;
            r1.register(&a.object, a.object_ref)?;
            Ok(Value::Null)
        })
        .concurrent("resolve", move |v| {
            let a: ObjectArg = args(v)?;
            reply(r2.resolve(&a.object)?)
        })
        .concurrent("wait_for", move |v| {
            let a: WaitArgs = args(v)?;
            reply(r3.wait_for(&a.object, Duration::from_millis(a.timeout_ms))?)
        })
        .concurrent("manifest_for", move |v| {
            let a: ProcessArg = args(v)?;
            reply(r4.manifest_for(&a.process)?)
        })
        .concurrent("remove_process", move |v| {
            let a: ProcessArg = args(v)?;
            reply(r5.remove_process(&a.process))
        })
        .concurrent("entries", move |_| reply(r6.entries()))
        .concurrent("config", move |_| reply(r7.config()))
        .build()
}

/// Client side of the name service.
pub struct RegistryClient {
    client: Client,
}

impl RegistryClient {
    pub fn new(registry_ref: ObjectRef, policy: ConnectionPolicy) -> Result<RegistryClient> {
        Ok(RegistryClient {
            client: Client::new(Target::Ref(registry_ref), policy, None)?,
        })
    }

    /// Connects to `__registry` at `host:port`.
    pub fn at(addr: &str) -> Result<RegistryClient> {
        let (host, port) = addr
            .rsplit_once(':')
            .ok_or_else(|| Error::bad_args(format!("bad registry address {addr:?}")))?;
        let port: u16 = port
            .parse()
            .map_err(|_| Error::bad_args(format!("bad registry address {addr:?}")))?;
        Self::new(
            ObjectRef::new(host, port, "sysman", REGISTRY_OBJECT)?,
            ConnectionPolicy::default(),
        )
    }

    pub fn registry_ref(&self) -> ObjectRef {
        self.client.current_ref().expect("registry client has a fixed ref")
    }

    pub fn register(&self, object: &str, object_ref: &ObjectRef) -> Result<()> {
        self.client
            .invoke("register", json!({"object": object, "ref": object_ref}))
            .map(|_| ())
    }

    pub fn resolve(&self, object: &str) -> Result<ObjectRef> {
        args(self.client.invoke("resolve", json!({ "object": object }))?)
    }

    pub fn wait_for(&self, object: &str, timeout: Duration) -> Result<ObjectRef> {
        let call_timeout = timeout + self.client.policy().call_timeout();
        args(self.client.invoke_with_timeout(
            "wait_for",
            json!({"object": object, "timeout_ms": timeout.as_millis() as u64}),
            call_timeout,
        )?)
    }

    pub fn manifest_for(&self, process: &str) -> Result<Vec<ObjectSpec>> {
        args(self.client.invoke("manifest_for", json!({ "process": process }))?)
    }

    pub fn entries(&self) -> Result<Vec<NameEntry>> {
        args(self.client.invoke("entries", Value::Null)?)
    }

    pub fn config(&self) -> Result<Option<FacilityConfig>> {
        args(self.client.invoke("config", Value::Null)?)
    }

    pub fn ping(&self) -> bool {
        self.client.ping()
    }
}

impl Resolver for RegistryClient {
    fn resolve(&self, name: &str, timeout: Duration) -> Result<ObjectRef> {
        args(
            self.client
                .invoke_with_timeout("resolve", json!({ "object": name }), timeout)?,
        )
    }
}
