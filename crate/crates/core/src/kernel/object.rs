use std::any::Any;
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Whether a configurable is private to its process or exported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Local,
    Distributed,
}

pub type Handler = Arc<dyn Fn(Value) -> Result<Value> + Send + Sync>;

#[derive(Clone)]
struct Method {
    handler: Handler,
    concurrent: bool,
}

/// An object created at boot from the configuration manifest, exposing a
/// table of named methods.
///
/// Calls on one configurable are serialized by the dispatcher unless the
/// method was registered as concurrent.
#[derive(Clone)]
pub struct Configurable {
    name: String,
    type_tag: String,
    scope: Scope,
    methods: Arc<BTreeMap<String, Method>>,
    instance: Option<Arc<dyn Any + Send + Sync>>,
}

impl fmt::Debug for Configurable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Configurable")
            .field("name", &self.name)
            .field("type_tag", &self.type_tag)
            .field("scope", &self.scope)
            .field("methods", &self.methods.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl Configurable {
    pub fn builder(name: impl Into<String>, type_tag: impl Into<String>, scope: Scope) -> ConfigurableBuilder {
        ConfigurableBuilder {
            name: name.into(),
            type_tag: type_tag.into(),
            scope,
            methods: BTreeMap::new(),
            instance: None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn type_tag(&self) -> &str {
        &self.type_tag
    }

    pub fn scope(&self) -> Scope {
        self.scope
    }

    pub fn method_names(&self) -> impl Iterator<Item = &str> {
        self.methods.keys().map(String::as_str)
    }

    pub fn has_method(&self, method: &str) -> bool {
        self.methods.contains_key(method)
    }

    pub fn is_concurrent(&self, method: &str) -> bool {
        self.methods.get(method).is_some_and(|m| m.concurrent)
    }

    pub fn call(&self, method: &str, args: Value) -> Result<Value> {
        let m = self
            .methods
            .get(method)
            .ok_or_else(|| Error::no_such_method(format!("{}.{method}", self.name)))?;
        (m.handler)(args)
    }

    /// The typed object behind the method table, if one was attached.
    pub fn instance<T: Any + Send + Sync>(&self) -> Option<Arc<T>> {
        self.instance.clone()?.downcast::<T>().ok()
    }
}

pub struct ConfigurableBuilder {
    name: String,
    type_tag: String,
    scope: Scope,
    methods: BTreeMap<String, Method>,
    instance: Option<Arc<dyn Any + Send + Sync>>,
}

impl ConfigurableBuilder {
    /// Adds a method that runs under the object's serialization lock.
    pub fn method<F>(mut self, name: &str, f: F) -> Self
    where
        F: Fn(Value) -> Result<Value> + Send + Sync + 'static,
    {
        self.methods.insert(
            name.to_string(),
            Method {
                handler: Arc::new(f),
                concurrent: false,
            },
        );
        self
    }

    /// Adds a method that may run concurrently with other calls on the object.
    pub fn concurrent<F>(mut self, name: &str, f: F) -> Self
    where
        F: Fn(Value) -> Result<Value> + Send + Sync + 'static,
    {
        self.methods.insert(
            name.to_string(),
            Method {
                handler: Arc::new(f),
                concurrent: true,
            },
        );
        self
    }

    pub fn instance<T: Any + Send + Sync>(mut self, instance: Arc<T>) -> Self {
        self.instance = Some(instance);
        self
    }

    pub fn build(self) -> Configurable {
        Configurable {
            name: self.name,
            type_tag: self.type_tag,
            scope: self.scope,
            methods: Arc::new(self.methods),
            instance: self.instance,
        }
    }
}

/// Deserializes handler arguments, mapping failures to BAD_ARGS.
pub fn args<T: serde::de::DeserializeOwned>(value: Value) -> Result<T> {
    serde_json::from_value(value).map_err(|e| Error::bad_args(e.to_string()))
}

/// Serializes a handler result.
pub fn reply<T: Serialize>(value: T) -> Result<Value> {
    serde_json::to_value(value).map_err(|e| Error::app(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::ErrorCode;
    use serde_json::json;

    #[test]
    fn method_table_routes_and_rejects_unknown() {
        let c = Configurable::builder("acc", "counter", Scope::Distributed)
            .method("add", |v| Ok(json!(v["a"].as_i64().unwrap_or(0) + 1)))
            .concurrent("peek", |_| Ok(json!(0)))
            .build();
        assert_eq!(c.call("add", json!({"a": 2})).unwrap(), json!(3));
        assert_eq!(c.call("nope", Value::Null).unwrap_err().code, ErrorCode::NoSuchMethod);
        assert!(c.is_concurrent("peek"));
        assert!(!c.is_concurrent("add"));
        assert_eq!(c.method_names().collect::<Vec<_>>(), ["add", "peek"]);
    }

    #[test]
    fn instance_downcasts() {
        let c = Configurable::builder("x", "t", Scope::Local)
            .instance(Arc::new(41u32))
            .build();
        assert_eq!(*c.instance::<u32>().unwrap(), 41);
        assert!(c.instance::<String>().is_none());
    }
}
