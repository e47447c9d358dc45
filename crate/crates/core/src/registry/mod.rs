//! The configuration framework: a name service mapping global object names
//! to references, and the facility database that drives object creation.

mod config;
mod names;
mod service;

pub use config::{
    load_config, Category, Endpoint, FacilityConfig, ObjectSpec, ProcessSpec, CONTROLLERS_PARAM,
    DEFAULT_WORKER_COUNT,
};
pub use names::{now_ms, NameEntry, NameTable};
pub use service::{registry_object, Registry, RegistryClient, REGISTRY_OBJECT};
