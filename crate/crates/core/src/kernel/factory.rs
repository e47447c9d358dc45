use std::any::{Any, TypeId};
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use super::object::{Configurable, Scope};
use crate::conduit::{Client, ConnectionPolicy, ObjectRef, Resolver, Target};
use crate::error::{check_name_token, Error, Result};
use crate::registry::{ObjectSpec, ProcessSpec, RegistryClient};
use crate::services::{ServiceHub, ServicesClient, Severity};
use crate::supervisory::SinkFactory;

/// Builds one configurable from its spec.
pub type Constructor = Arc<dyn Fn(&ObjectSpec, &mut BuildContext) -> Result<Configurable> + Send + Sync>;

/// A set of constructors keyed by type tag, all producing one scope.
#[derive(Clone)]
pub struct Factory {
    scope: Scope,
    constructors: BTreeMap<String, Constructor>,
}

impl fmt::Debug for Factory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Factory")
            .field("scope", &self.scope)
            .field("type_tags", &self.type_tags())
            .finish()
    }
}

impl Factory {
    pub fn new(scope: Scope) -> Factory {
        Factory {
            scope,
            constructors: BTreeMap::new(),
        }
    }

    pub fn scope(&self) -> Scope {
        self.scope
    }

    pub fn register_type<F>(&mut self, type_tag: &str, constructor: F) -> Result<()>
    where
        F: Fn(&ObjectSpec, &mut BuildContext) -> Result<Configurable> + Send + Sync + 'static,
    {
        check_name_token("type_tag", type_tag)?;
        if self.constructors.contains_key(type_tag) {
            return Err(Error::bad_args(format!("duplicate type_tag {type_tag:?}")));
        }
        self.constructors.insert(type_tag.to_string(), Arc::new(constructor));
        Ok(())
    }

    /// Builder-style [`Factory::register_type`]; panics on a duplicate tag.
    pub fn with<F>(mut self, type_tag: &str, constructor: F) -> Factory
    where
        F: Fn(&ObjectSpec, &mut BuildContext) -> Result<Configurable> + Send + Sync + 'static,
    {
        self.register_type(type_tag, constructor)
            .unwrap_or_else(|e| panic!("{e}"));
        self
    }

    pub fn has_type(&self, type_tag: &str) -> bool {
        self.constructors.contains_key(type_tag)
    }

    pub fn type_tags(&self) -> Vec<String> {
        self.constructors.keys().cloned().collect()
    }

    pub fn construct(&self, spec: &ObjectSpec, ctx: &mut BuildContext) -> Result<Configurable> {
        if spec.scope != self.scope {
            return Err(Error::bad_args(format!(
                "{}: scope {:?} does not match factory scope {:?}",
                spec.name, spec.scope, self.scope
            )));
        }
        let ctor = self
            .constructors
            .get(&spec.type_tag)
            .ok_or_else(|| Error::bad_args(format!("{}: unknown type_tag {:?}", spec.name, spec.type_tag)))?;
        let obj = ctor(spec, ctx)?;
        if obj.name() != spec.name || obj.type_tag() != spec.type_tag || obj.scope() != spec.scope {
            return Err(Error::app(format!(
                "constructor for {:?} built {}:{} ({:?})",
                spec.type_tag,
                obj.name(),
                obj.type_tag(),
                obj.scope()
            )));
        }
        Ok(obj)
    }
}

/// Client-side framework services available to every configurable.
#[derive(Clone)]
pub struct Framework {
    pub process: String,
    pub registry: Arc<RegistryClient>,
    pub services: Arc<ServicesClient>,
    /// Delivery path for updates this process publishes.
    pub sinks: Arc<dyn SinkFactory>,
    /// Default policy for calls to other objects.
    pub policy: ConnectionPolicy,
}

impl Framework {
    pub fn hub(&self) -> Arc<dyn ServiceHub> {
        self.services.clone()
    }

    pub fn resolver(&self) -> Arc<dyn Resolver> {
        self.registry.clone()
    }

    /// Client for a global object name, resolved through the registry.
    pub fn client(&self, object: &str, policy: ConnectionPolicy) -> Result<Client> {
        Client::new(Target::Name(object.to_string()), policy, Some(self.resolver()))
    }

    pub fn resolve(&self, object: &str) -> Result<ObjectRef> {
        self.registry.resolve(object)
    }

    pub fn log(&self, severity: Severity, text: &str) {
        self.services.log(&self.process, severity, text);
    }
}

/// A per-process value shared between configurables, such as a simulation clock.
pub type Extension = Arc<dyn Any + Send + Sync>;

/// What a constructor sees while the process is being built.
pub struct BuildContext {
    process: ProcessSpec,
    self_host: String,
    self_port: u16,
    framework: Option<Framework>,
    locals: BTreeMap<String, Configurable>,
    extensions: HashMap<TypeId, Extension>,
    on_ready: Vec<Box<dyn FnOnce() -> Result<()> + Send>>,
    on_shutdown: Vec<Box<dyn FnOnce() + Send>>,
}

impl BuildContext {
    pub fn new(process: ProcessSpec, self_host: &str, self_port: u16, framework: Option<Framework>) -> Self {
        BuildContext {
            process,
            self_host: self_host.to_string(),
            self_port,
            framework,
            locals: BTreeMap::new(),
            extensions: HashMap::new(),
            on_ready: Vec::new(),
            on_shutdown: Vec::new(),
        }
    }

    pub fn process(&self) -> &ProcessSpec {
        &self.process
    }

    /// The reference other processes use to reach `object` in this process.
    pub fn self_ref(&self, object: &str) -> Result<ObjectRef> {
        ObjectRef::new(self.self_host.clone(), self.self_port, self.process.name.clone(), object)
    }

    /// Framework clients; APP_ERROR in a detached context (unit tests).
    pub fn framework(&self) -> Result<&Framework> {
        self.framework
            .as_ref()
            .ok_or_else(|| Error::app("no framework services in this context"))
    }

    pub(crate) fn add_local(&mut self, obj: Configurable) {
        self.locals.insert(obj.name().to_string(), obj);
    }

    pub fn local_object(&self, name: &str) -> Result<&Configurable> {
        self.locals
            .get(name)
            .ok_or_else(|| Error::bad_args(format!("no local object {name:?} in {}", self.process.name)))
    }

    /// The typed instance behind a local configurable.
    pub fn local<T: Any + Send + Sync>(&self, name: &str) -> Result<Arc<T>> {
        self.local_object(name)?
            .instance::<T>()
            .ok_or_else(|| Error::bad_args(format!("local object {name:?} has the wrong type")))
    }

    pub fn local_names(&self) -> Vec<String> {
        self.locals.keys().cloned().collect()
    }

    pub fn extension<T: Any + Send + Sync>(&self) -> Option<Arc<T>> {
        self.extensions
            .get(&TypeId::of::<T>())
            .and_then(|e| e.clone().downcast::<T>().ok())
    }

    pub fn extension_or_insert_with<T: Any + Send + Sync>(&mut self, make: impl FnOnce() -> T) -> Arc<T> {
        let e = self
            .extensions
            .entry(TypeId::of::<T>())
            .or_insert_with(|| Arc::new(make()));
        e.clone().downcast::<T>().expect("extension keyed by its own type")
    }

    /// Runs after every object is constructed and the dispatcher is live,
    /// before the process reports ready. An error fails the boot.
    pub fn on_ready(&mut self, f: impl FnOnce() -> Result<()> + Send + 'static) {
        self.on_ready.push(Box::new(f));
    }

    /// Runs when the process shuts down or is crashed.
    pub fn on_shutdown(&mut self, f: impl FnOnce() + Send + 'static) {
        self.on_shutdown.push(Box::new(f));
    }

    pub(crate) fn take_hooks(&mut self) -> (Vec<Box<dyn FnOnce() -> Result<()> + Send>>, Vec<Box<dyn FnOnce() + Send>>) {
        (std::mem::take(&mut self.on_ready), std::mem::take(&mut self.on_shutdown))
    }
}

/// Default timeout for framework calls made during boot.
pub const BOOT_CALL_TIMEOUT: Duration = Duration::from_secs(5);

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{Category, Endpoint};
    use serde_json::{json, Value};

    fn spec(name: &str, tag: &str, scope: Scope) -> ObjectSpec {
        ObjectSpec {
            name: name.into(),
            scope,
            type_tag: tag.into(),
            params: Value::Null,
        }
    }

    fn ctx() -> BuildContext {
        let p = ProcessSpec {
            name: "p".into(),
            category: Category::Fep,
            endpoint: Endpoint::default(),
            worker_count: 4,
            variant: None,
            http_port: None,
            objects: vec![],
        };
        BuildContext::new(p, "127.0.0.1", 9, None)
    }

    struct Axis(u32);

    fn axis_factory() -> Factory {
        Factory::new(Scope::Local).with("stepper_axis", |s, _| {
            Ok(Configurable::builder(&s.name, &s.type_tag, Scope::Local)
                .instance(Arc::new(Axis(7)))
                .method("get", |_| Ok(json!(1)))
                .build())
        })
    }

    #[test]
    fn register_then_construct() {
        let f = axis_factory();
        let obj = f.construct(&spec("x", "stepper_axis", Scope::Local), &mut ctx()).unwrap();
        assert_eq!(obj.type_tag(), "stepper_axis");
        assert_eq!(obj.instance::<Axis>().unwrap().0, 7);
    }

    #[test]
    fn duplicate_tag_rejected() {
        let mut f = axis_factory();
        let e = f.register_type("stepper_axis", |s, _| Ok(Configurable::builder(&s.name, &s.type_tag, Scope::Local).build()));
        assert_eq!(e.unwrap_err().code, crate::ErrorCode::BadArgs);
    }

    #[test]
    fn unknown_tag_and_scope_mismatch() {
        let f = axis_factory();
        let e = f.construct(&spec("x", "frobnicator", Scope::Local), &mut ctx()).unwrap_err();
        assert_eq!(e.code, crate::ErrorCode::BadArgs);
        let e = f.construct(&spec("x", "stepper_axis", Scope::Distributed), &mut ctx()).unwrap_err();
        assert_eq!(e.code, crate::ErrorCode::BadArgs);
    }

    #[test]
    fn typed_local_lookup() {
        let f = axis_factory();
        let mut c = ctx();
        let obj = f.construct(&spec("x", "stepper_axis", Scope::Local), &mut c).unwrap();
        c.add_local(obj);
        assert_eq!(c.local::<Axis>("x").unwrap().0, 7);
        assert!(c.local::<String>("x").is_err());
        assert!(c.local::<Axis>("y").is_err());
    }

    #[test]
    fn extensions_are_shared() {
        let mut c = ctx();
        let a = c.extension_or_insert_with(|| 5u32);
        let b = c.extension_or_insert_with(|| 6u32);
        assert!(Arc::ptr_eq(&a, &b));
        assert_eq!(*c.extension::<u32>().unwrap(), 5);
    }
}
