use std::collections::HashMap;
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use crate::conduit::ObjectRef;
use crate::error::{Error, Result};
use crate::kernel::{boot, BootOptions, Lifecycle, ProcessHandle, ProcessTemplate};
use crate::registry::{Category, ProcessSpec};

/// A started process as seen by the system manager.
pub trait ChildProcess: Send {
    fn id(&self) -> Option<u32>;
    /// `Some(description)` once the process has exited.
    fn try_exit(&mut self) -> Option<String>;
    fn kill(&mut self);
}

/// Starts the process described by a spec. The child finds the system
/// manager through `registry`.
pub trait Launcher: Send + Sync {
    fn spawn(&self, spec: &ProcessSpec, registry: &ObjectRef) -> Result<Box<dyn ChildProcess>>;
}

/// Launches each process as an OS child running the facility executable:
/// `<program> fep|supervisor|gateway --name <n> --config <file> --sysman <addr>`.
#[derive(Debug, Clone)]
pub struct CommandLauncher {
    pub program: PathBuf,
    pub config: PathBuf,
    /// Inherit stdout/stderr instead of discarding them.
    pub inherit_output: bool,
}

impl CommandLauncher {
    pub fn new(program: impl Into<PathBuf>, config: impl Into<PathBuf>) -> Self {
        CommandLauncher {
            program: program.into(),
            config: config.into(),
            inherit_output: false,
        }
    }

    pub fn command(&self, spec: &ProcessSpec, registry: &ObjectRef) -> Command {
        let sub = match spec.category {
            Category::Fep => "fep",
            Category::Supervisor => "supervisor",
            Category::Gateway => "gateway",
        };
        let mut cmd = Command::new(&self.program);
        cmd.arg(sub)
            .arg("--name")
            .arg(&spec.name)
            .arg("--config")
            .arg(&self.config)
            .arg("--sysman")
            .arg(registry.addr());
        if spec.category == Category::Gateway {
            cmd.arg("--http").arg(spec.http_port.unwrap_or(0).to_string());
        }
        cmd.stdin(Stdio::null());
        if !self.inherit_output {
            cmd.stdout(Stdio::null()).stderr(Stdio::null());
        }
        cmd
    }
}

struct OsChild(Child);

impl ChildProcess for OsChild {
    fn id(&self) -> Option<u32> {
        Some(self.0.id())
    }

    fn try_exit(&mut self) -> Option<String> {
        match self.0.try_wait() {
            Ok(Some(status)) => Some(status.to_string()),
            Ok(None) => None,
            Err(e) => Some(format!("wait failed: {e}")),
        }
    }

    fn kill(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

impl Launcher for CommandLauncher {
    fn spawn(&self, spec: &ProcessSpec, registry: &ObjectRef) -> Result<Box<dyn ChildProcess>> {
        let child = self
            .command(spec, registry)
            .spawn()
            .map_err(|e| Error::app(format!("cannot start {}: {e}", spec.name)))?;
        Ok(Box::new(OsChild(child)))
    }
}

/// Maps a process spec to the template that boots it.
pub type TemplateSource = Arc<dyn Fn(&ProcessSpec) -> Result<ProcessTemplate> + Send + Sync>;

/// Boots every process on a thread of the current OS process. Used by
/// tests and single-binary demos; behaviour on the wire is the same.
pub struct InProcessLauncher {
    templates: TemplateSource,
    options: BootOptions,
    latest: Mutex<HashMap<String, Arc<Mutex<Slot>>>>,
}

enum Slot {
    Booting { killed: bool },
    Running(ProcessHandle),
    BootFailed(String),
}

impl InProcessLauncher {
    pub fn new(templates: TemplateSource, options: BootOptions) -> Self {
        InProcessLauncher {
            templates,
            options,
            latest: Mutex::new(HashMap::new()),
        }
    }

    /// Handle of the most recent launch of `process`, once booted.
    pub fn handle(&self, process: &str) -> Option<ProcessHandle> {
        let slot = self.latest.lock().get(process).cloned()?;
        let g = slot.lock();
        match &*g {
            Slot::Running(h) => Some(h.clone()),
            _ => None,
        }
    }

    /// Like [`handle`](Self::handle), polling until the boot thread has
    /// stored it. A process reports ready slightly before that happens.
    pub fn wait_handle(&self, process: &str, timeout: Duration) -> Option<ProcessHandle> {
        let deadline = Instant::now() + timeout;
        loop {
            if let Some(h) = self.handle(process) {
                return Some(h);
            }
            if Instant::now() >= deadline {
                return None;
            }
            thread::sleep(Duration::from_millis(2));
        }
    }
}

struct ThreadChild(Arc<Mutex<Slot>>);

impl ChildProcess for ThreadChild {
    fn id(&self) -> Option<u32> {
        Some(std::process::id())
    }

    fn try_exit(&mut self) -> Option<String> {
        match &*self.0.lock() {
            Slot::Booting { killed: false } => None,
            Slot::Booting { killed: true } => Some("killed".into()),
            Slot::BootFailed(e) => Some(format!("boot failed: {e}")),
            Slot::Running(h) => match h.lifecycle() {
                Lifecycle::Running => None,
                Lifecycle::Stopped => Some("stopped".into()),
                Lifecycle::Crashed => Some("crashed".into()),
            },
        }
    }

    fn kill(&mut self) {
        let mut g = self.0.lock();
        match &mut *g {
            Slot::Booting { killed } => *killed = true,
            Slot::Running(h) => {
                h.crash();
            }
            Slot::BootFailed(_) => {}
        }
    }
}

impl Launcher for InProcessLauncher {
    fn spawn(&self, spec: &ProcessSpec, registry: &ObjectRef) -> Result<Box<dyn ChildProcess>> {
        let template = (self.templates)(spec)?;
        let slot = Arc::new(Mutex::new(Slot::Booting { killed: false }));
        self.latest.lock().insert(spec.name.clone(), slot.clone());
        let (registry, options, s) = (registry.clone(), self.options.clone(), slot.clone());
        thread::Builder::new()
            .name(format!("boot-{}", spec.name))
            .spawn(move || {
                let booted = boot(template, &registry, options);
                let mut g = s.lock();
                let killed = matches!(*g, Slot::Booting { killed: true });
                *g = match booted {
                    Ok(h) => {
                        if killed {
                            h.crash();
                        }
                        Slot::Running(h)
                    }
                    Err(e) => Slot::BootFailed(e.to_string()),
                };
            })
            .map_err(|e| Error::app(format!("cannot start {}: {e}", spec.name)))?;
        Ok(Box::new(ThreadChild(slot)))
    }
}
