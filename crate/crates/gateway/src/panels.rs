use std::collections::BTreeMap;

use iccs_core::error::check_name_token;
use iccs_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// How a console renders one field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Display {
    Number,
    Text,
    Flag,
    Gauge,
    Chart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldLayout {
    pub name: String,
    pub display: Display,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandSpec {
    pub method: String,
    /// JSON-schema-like description of the argument object.
    #[serde(default)]
    pub args: Value,
    pub requires_reservation: bool,
}

/// A data stream a panel subscribes to when opened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum StreamSpec {
    Mapper { mapper: String },
    Monitor { field: String, precision: f64, latency_ms: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelDescriptor {
    pub type_tag: String,
    pub panel_kind: String,
    pub fields: Vec<FieldLayout>,
    pub commands: Vec<CommandSpec>,
    #[serde(default)]
    pub streams: Vec<StreamSpec>,
}

impl PanelDescriptor {
    pub fn command(&self, method: &str) -> Option<&CommandSpec> {
        self.commands.iter().find(|c| c.method == method)
    }

    pub fn validate(&self) -> Result<()> {
        check_name_token("type_tag", &self.type_tag)?;
        check_name_token("panel_kind", &self.panel_kind)?;
        let mut seen = std::collections::HashSet::new();
        for c in &self.commands {
            if !seen.insert(c.method.as_str()) {
                return Err(Error::bad_args(format!(
                    "panel {}: duplicate command {}",
                    self.type_tag, c.method
                )));
            }
        }
        Ok(())
    }
}

/// Panel descriptors keyed by type tag.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PanelCatalog {
    panels: BTreeMap<String, PanelDescriptor>,
}

impl PanelCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, panel: PanelDescriptor) -> Result<()> {
        panel.validate()?;
        if self.panels.contains_key(&panel.type_tag) {
            return Err(Error::bad_args(format!("duplicate panel for {}", panel.type_tag)));
        }
        self.panels.insert(panel.type_tag.clone(), panel);
        Ok(())
    }

    pub fn with(mut self, panel: PanelDescriptor) -> Self {
        self.insert(panel).expect("valid panel descriptor");
        self
    }

    pub fn get(&self, type_tag: &str) -> Option<&PanelDescriptor> {
        self.panels.get(type_tag)
    }

    pub fn type_tags(&self) -> impl Iterator<Item = &str> {
        self.panels.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &PanelDescriptor> {
        self.panels.values()
    }

    /// True if `method` on an object of `type_tag` needs the caller's reservation token.
    pub fn requires_reservation(&self, type_tag: &str, method: &str) -> bool {
        self.get(type_tag)
            .and_then(|p| p.command(method))
            .is_some_and(|c| c.requires_reservation)
    }
}
