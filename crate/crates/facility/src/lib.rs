//! A simulated laser-alignment facility on top of the ICCS frameworks:
//! stepper axes, multi-axis actuators, a shutter, an optical sensor and an
//! alignment LCU, plus the process templates and CLI that run them.

pub mod actuator;
pub mod alignment;
pub mod axis;
pub mod cli;
pub mod sensor;
pub mod shutter;
pub mod sim;
pub mod templates;

pub use actuator::Actuator;
pub use alignment::{coordinate_descent, AlignmentLcu, DescentParams, Phase, Probe};
pub use axis::AxisController;
pub use sensor::{Sensor, SensorModel};
pub use shutter::{Shutter, ShutterDrive, ShutterState};
pub use sim::SimClock;
pub use templates::{demo_config, demo_panels, template_for, templates};

pub type AxisF64 = AxisController<f64>;
pub type AxisF32 = AxisController<f32>;
pub type SensorModelF64 = SensorModel<f64>;
pub type SensorModelF32 = SensorModel<f32>;
