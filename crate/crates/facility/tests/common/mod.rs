//! Boots the demo facility inside the test process on ephemeral ports.
#![allow(dead_code)]

use std::sync::Arc;
use std::time::{Duration, Instant};

use iccs_core::conduit::{Client, ConnectionPolicy, ObjectRef, Target};
use iccs_core::kernel::{BootOptions, ProcessHandle};
use iccs_core::registry::{FacilityConfig, ProcessSpec};
use iccs_core::sysman::{Central, ChildProcess, InProcessLauncher, Launcher, SysmanOptions};
use iccs_facility::templates::DEMO_CONFIG;
use serde_json::Value;

pub struct Knobs {
    pub rate: f64,
    pub eta: f64,
    pub heartbeat: Duration,
    /// Hide process exits from the system manager, so only heartbeats reveal a crash.
    pub silent: bool,
}

impl Default for Knobs {
    fn default() -> Self {
        Knobs {
            rate: 10.0,
            eta: 0.01,
            heartbeat: Duration::from_millis(200),
            silent: false,
        }
    }
}

pub fn config(k: &Knobs) -> FacilityConfig {
    let mut v: Value = serde_json::from_str(DEMO_CONFIG).unwrap();
    v["sysman"]["port"] = 0.into();
    for p in v["processes"].as_array_mut().unwrap() {
        p["endpoint"]["port"] = 0.into();
        if p.get("http_port").is_some() {
            p["http_port"] = 0.into();
        }
        for o in p["objects"].as_array_mut().unwrap() {
            match o["type_tag"].as_str().unwrap() {
                "sim_clock" => o["params"]["rate"] = k.rate.into(),
                "sensor" => o["params"]["eta"] = k.eta.into(),
                _ => {}
            }
        }
    }
    FacilityConfig::from_json(&v.to_string()).unwrap()
}

struct Silent(Arc<InProcessLauncher>);

struct SilentChild(Box<dyn ChildProcess>);

impl ChildProcess for SilentChild {
    fn id(&self) -> Option<u32> {
        self.0.id()
    }
    fn try_exit(&mut self) -> Option<String> {
        None
    }
    fn kill(&mut self) {
        self.0.kill()
    }
}

impl Launcher for Silent {
    fn spawn(&self, spec: &ProcessSpec, registry: &ObjectRef) -> iccs_core::Result<Box<dyn ChildProcess>> {
        Ok(Box::new(SilentChild(self.0.spawn(spec, registry)?)))
    }
}

pub struct Demo {
    pub central: Arc<Central>,
    pub launcher: Arc<InProcessLauncher>,
}

impl Demo {
    /// Starts the system manager without launching anything.
    pub fn start(k: &Knobs) -> Demo {
        let launcher = Arc::new(InProcessLauncher::new(iccs_facility::templates(), BootOptions::default()));
        let as_launcher: Arc<dyn Launcher> = if k.silent {
            Arc::new(Silent(launcher.clone()))
        } else {
            launcher.clone()
        };
        let central = Central::start(
            config(k),
            SysmanOptions {
                heartbeat: k.heartbeat,
                missed_limit: 3,
                phase_timeout: Duration::from_secs(10),
                ..SysmanOptions::default()
            },
            Some(as_launcher),
        )
        .unwrap();
        Demo { central, launcher }
    }

    pub fn launch(k: &Knobs) -> Demo {
        let d = Demo::start(k);
        d.central.launch().unwrap();
        d
    }

    pub fn handle(&self, process: &str) -> ProcessHandle {
        self.launcher.wait_handle(process, Duration::from_secs(5)).unwrap()
    }

    pub fn client(&self, name: &str) -> Client {
        Client::new(
            Target::Name(name.into()),
            ConnectionPolicy::default(),
            Some(self.central.registry().clone()),
        )
        .unwrap()
    }
}

impl Drop for Demo {
    fn drop(&mut self) {
        self.central.shutdown_all(Duration::from_secs(2));
        self.central.stop();
    }
}

pub fn wait_until(timeout: Duration, mut ok: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        if ok() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(5));
    }
    ok()
}
