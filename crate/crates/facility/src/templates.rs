//! Process templates for the demo facility. Every process runs the same
//! kernel; only the pair of factories differs by category and variant.

use std::sync::Arc;

use iccs_core::kernel::{Factory, ProcessTemplate, Scope};
use iccs_core::registry::{Category, FacilityConfig, ProcessSpec};
use iccs_core::sysman::TemplateSource;
use iccs_core::{Error, Result};
use iccs_gateway::{
    CommandSpec, Display, FieldLayout, GatewaySettings, PanelCatalog, PanelDescriptor, StreamSpec,
};
use serde_json::json;

use crate::{actuator, alignment, axis, sensor, shutter, sim};

pub const ALIGNMENT_VARIANT: &str = "alignment";
pub const DIAGNOSTICS_VARIANT: &str = "diagnostics";

/// The demo configuration shipped with the crate.
pub const DEMO_CONFIG: &str = include_str!("../fixtures/demo.json");

pub fn demo_config() -> FacilityConfig {
    FacilityConfig::from_json(DEMO_CONFIG).expect("bundled demo config is valid")
}

/// Controller and device factories for one process kind.
pub fn factories(category: Category, variant: Option<&str>, gateway: &GatewaySettings) -> Result<(Factory, Factory)> {
    let controllers = Factory::new(Scope::Local);
    let devices = Factory::new(Scope::Distributed);
    Ok(match (category, variant) {
        (Category::Fep, Some(ALIGNMENT_VARIANT)) => (
            controllers
                .with("sim_clock", sim::clock_object)
                .with("stepper_axis", axis::axis_object),
            devices.with(actuator::ACTUATOR_TYPE, actuator::actuator_object),
        ),
        (Category::Fep, Some(DIAGNOSTICS_VARIANT)) => (
            controllers
                .with("sim_clock", sim::clock_object)
                .with("shutter_drive", shutter::drive_object),
            devices
                .with("shutter", shutter::shutter_object)
                .with("sensor", sensor::sensor_object),
        ),
        (Category::Fep, v) => {
            return Err(Error::bad_args(format!("unknown front-end variant {v:?}")));
        }
        (Category::Supervisor, _) => (controllers, devices.with("alignment_lcu", alignment::lcu_object)),
        (Category::Gateway, _) => (controllers, iccs_gateway::register(devices, gateway.clone())),
    })
}

pub fn template_for(spec: &ProcessSpec, gateway: &GatewaySettings) -> Result<ProcessTemplate> {
    let (c, d) = factories(spec.category, spec.variant.as_deref(), gateway)?;
    ProcessTemplate::new(spec.clone(), c, d)
}

/// Template source for in-process launching, with the demo panels.
pub fn templates() -> TemplateSource {
    let settings = GatewaySettings {
        panels: demo_panels(),
        ..GatewaySettings::default()
    };
    Arc::new(move |spec: &ProcessSpec| template_for(spec, &settings))
}

fn field(name: &str, display: Display) -> FieldLayout {
    FieldLayout {
        name: name.into(),
        display,
    }
}

fn command(method: &str, args: serde_json::Value, requires_reservation: bool) -> CommandSpec {
    CommandSpec {
        method: method.into(),
        args,
        requires_reservation,
    }
}

fn monitor(field: &str, precision: f64) -> StreamSpec {
    StreamSpec::Monitor {
        field: field.into(),
        precision,
        latency_ms: 50,
    }
}

pub fn demo_panels() -> PanelCatalog {
    PanelCatalog::new()
        .with(PanelDescriptor {
            type_tag: actuator::ACTUATOR_TYPE.into(),
            panel_kind: "motion".into(),
            fields: vec![field("positions", Display::Text), field("moving", Display::Flag)],
            commands: vec![
                command("move_to", json!({"targets": "number[]"}), true),
                command("jog", json!({"axis": "integer", "delta": "number"}), true),
                command("stop", json!({}), true),
            ],
            streams: vec![monitor("positions", 0.0), monitor("moving", 0.0)],
        })
        .with(PanelDescriptor {
            type_tag: "shutter".into(),
            panel_kind: "toggle".into(),
            fields: vec![field("state", Display::Text)],
            commands: vec![command("open", json!({}), true), command("close", json!({}), true)],
            streams: vec![monitor("state", 0.0)],
        })
        .with(PanelDescriptor {
            type_tag: "sensor".into(),
            panel_kind: "trend".into(),
            fields: vec![field("value", Display::Chart)],
            commands: vec![command("read", json!({}), false)],
            streams: vec![monitor("value", 0.001)],
        })
        .with(PanelDescriptor {
            type_tag: "alignment_lcu".into(),
            panel_kind: "loop".into(),
            fields: vec![
                field("phase", Display::Text),
                field("iteration", Display::Number),
                field("best", Display::Gauge),
            ],
            commands: vec![
                command("align", json!({"threshold": "number", "max_iters": "integer"}), false),
                command("stop", json!({}), false),
                command("reset", json!({}), false),
            ],
            streams: vec![
                StreamSpec::Mapper {
                    mapper: "summary".into(),
                },
                StreamSpec::Mapper {
                    mapper: "positions".into(),
                },
            ],
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_demo_process_has_a_template() {
        let cfg = demo_config();
        let settings = GatewaySettings::default();
        for p in &cfg.processes {
            let t = template_for(p, &settings).unwrap();
            for o in &p.objects {
                let f = match o.scope {
                    Scope::Local => &t.controller_factory,
                    Scope::Distributed => &t.device_factory,
                };
                assert!(f.has_type(&o.type_tag), "{}: {}", p.name, o.type_tag);
            }
        }
    }

    #[test]
    fn unknown_variant_is_refused() {
        let s = GatewaySettings::default();
        assert!(factories(Category::Fep, None, &s).is_err());
        assert!(factories(Category::Fep, Some("cryo"), &s).is_err());
    }
}
