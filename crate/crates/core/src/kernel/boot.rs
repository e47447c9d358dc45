use std::sync::{Arc, Weak};
use std::thread;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::factory::{BuildContext, Factory, Framework};
use super::host::Host;
use super::object::{args, reply, Configurable, Scope};
use super::Dispatcher;
use crate::conduit::{Client, ConnectionPolicy, ObjectRef, Target};
use crate::error::{Error, Result};
use crate::registry::{ProcessSpec, RegistryClient};
use crate::services::{ServicesClient, Severity};
use crate::supervisory::RemoteSinks;
use crate::sysman::{ProcState, Report, SYSMAN_OBJECT};

/// Per-process control object used for fault injection and shutdown.
pub const PROCESS_OBJECT: &str = "__process";

/// A process definition: its spec plus the two factories. The factories are
/// the only thing that differs between process kinds.
#[derive(Debug, Clone)]
pub struct ProcessTemplate {
    pub spec: ProcessSpec,
    pub controller_factory: Factory,
    pub device_factory: Factory,
}

impl ProcessTemplate {
    pub fn new(spec: ProcessSpec, controller_factory: Factory, device_factory: Factory) -> Result<Self> {
        if controller_factory.scope() != Scope::Local || device_factory.scope() != Scope::Distributed {
            return Err(Error::bad_args("controller factory must be local, device factory distributed"));
        }
        if spec.worker_count == 0 {
            return Err(Error::bad_args("worker_count must be >= 1"));
        }
        Ok(ProcessTemplate {
            spec,
            controller_factory,
            device_factory,
        })
    }

    fn factory_for(&self, scope: Scope) -> &Factory {
        match scope {
            Scope::Local => &self.controller_factory,
            Scope::Distributed => &self.device_factory,
        }
    }
}

/// Switches for exercising failure paths in one process.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fault {
    /// Terminate abruptly, without reporting.
    #[serde(default)]
    pub crash: bool,
    /// Close every open connection once.
    #[serde(default)]
    pub drop_connections: bool,
    /// Delay every reply; 0 clears.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply_delay_ms: Option<u64>,
}

pub type CrashHook = Arc<dyn Fn() + Send + Sync>;

#[derive(Clone)]
pub struct BootOptions {
    /// Policy for framework clients (registry, services, system manager).
    pub policy: ConnectionPolicy,
    /// What a crash fault does. Defaults to [`ProcessHandle::crash`];
    /// a standalone executable exits instead.
    pub on_crash: Option<CrashHook>,
}

impl Default for BootOptions {
    fn default() -> Self {
        BootOptions {
            policy: ConnectionPolicy {
                wait_for_presence: true,
                max_attempts: 50,
                retry_backoff_ms: 100,
                call_timeout_ms: 2000,
                ..ConnectionPolicy::default()
            },
            on_crash: None,
        }
    }
}

/// The local manager: reports this process's state to `__sysman`.
pub struct SysmanProxy {
    process: String,
    client: Client,
    control: ObjectRef,
}

impl SysmanProxy {
    pub fn new(process: &str, sysman: ObjectRef, control: ObjectRef, policy: ConnectionPolicy) -> Result<Self> {
        Ok(SysmanProxy {
            process: process.to_string(),
            client: Client::new(Target::Ref(sysman), policy, None)?,
            control,
        })
    }

    /// Returns the heartbeat period the system manager expects.
    pub fn report(&self, state: ProcState, error: Option<String>) -> Result<Option<Duration>> {
        let r = Report {
            process: self.process.clone(),
            state,
            control: Some(self.control.clone()),
            pid: Some(std::process::id()),
            error,
        };
        let ack = self.client.invoke("report", serde_json::to_value(r)?)?;
        Ok(ack.get("heartbeat_ms").and_then(Value::as_u64).map(Duration::from_millis))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lifecycle {
    Running,
    Stopped,
    Crashed,
}

struct Inner {
    spec: ProcessSpec,
    host: Arc<Host>,
    framework: Framework,
    proxy: SysmanProxy,
    locals: Vec<Configurable>,
    distributed: Vec<String>,
    on_shutdown: Mutex<Vec<Box<dyn FnOnce() + Send>>>,
    life: Mutex<Lifecycle>,
    changed: Condvar,
    on_crash: Option<CrashHook>,
}

/// A booted process. Cloning shares the same process.
#[derive(Clone)]
pub struct ProcessHandle {
    inner: Arc<Inner>,
}

impl ProcessHandle {
    pub fn name(&self) -> &str {
        &self.inner.spec.name
    }

    pub fn spec(&self) -> &ProcessSpec {
        &self.inner.spec
    }

    pub fn host(&self) -> &Arc<Host> {
        &self.inner.host
    }

    pub fn dispatcher(&self) -> &Dispatcher {
        self.inner.host.dispatcher()
    }

    pub fn framework(&self) -> &Framework {
        &self.inner.framework
    }

    pub fn object_ref(&self, object: &str) -> Result<ObjectRef> {
        self.inner.host.object_ref(object)
    }

    pub fn control_ref(&self) -> ObjectRef {
        self.inner.proxy.control.clone()
    }

    /// Exported object names, in manifest order.
    pub fn distributed_names(&self) -> Vec<String> {
        self.inner.distributed.clone()
    }

    pub fn local_names(&self) -> Vec<String> {
        self.inner.locals.iter().map(|c| c.name().to_string()).collect()
    }

    pub fn local(&self, name: &str) -> Option<&Configurable> {
        self.inner.locals.iter().find(|c| c.name() == name)
    }

    /// A distributed object hosted here.
    pub fn object(&self, name: &str) -> Option<Configurable> {
        self.dispatcher().object(name)
    }

    pub fn lifecycle(&self) -> Lifecycle {
        *self.inner.life.lock()
    }

    pub fn is_running(&self) -> bool {
        self.lifecycle() == Lifecycle::Running
    }

    /// Blocks until the process stops or crashes.
    pub fn wait(&self) -> Lifecycle {
        let mut l = self.inner.life.lock();
        while *l == Lifecycle::Running {
            self.inner.changed.wait(&mut l);
        }
        *l
    }

    pub fn wait_timeout(&self, timeout: Duration) -> Lifecycle {
        let mut l = self.inner.life.lock();
        if *l == Lifecycle::Running {
            self.inner.changed.wait_for(&mut l, timeout);
        }
        *l
    }

    fn end(&self, how: Lifecycle) -> bool {
        {
            let mut l = self.inner.life.lock();
            if *l != Lifecycle::Running {
                return false;
            }
            *l = how;
        }
        if how == Lifecycle::Stopped {
            if let Err(e) = self.inner.proxy.report(ProcState::Stopped, None) {
                log::warn!("{}: stop not reported: {e}", self.name());
            }
        }
        let hooks = std::mem::take(&mut *self.inner.on_shutdown.lock());
        for h in hooks.into_iter().rev() {
            h();
        }
        self.inner.host.kill();
        self.inner.changed.notify_all();
        true
    }

    /// Graceful stop: reports `stopped`, then closes the endpoint.
    pub fn shutdown(&self) -> bool {
        self.end(Lifecycle::Stopped)
    }

    /// Abrupt stop: endpoint closed and heartbeats cease, nothing reported.
    pub fn crash(&self) -> bool {
        self.end(Lifecycle::Crashed)
    }

    /// Applies a fault to this process.
    pub fn inject(&self, fault: &Fault) {
        if let Some(ms) = fault.reply_delay_ms {
            self.inner.host.set_reply_delay(Duration::from_millis(ms));
        }
        if fault.drop_connections {
            self.inner.host.drop_connections();
        }
        if fault.crash {
            match &self.inner.on_crash {
                Some(hook) => hook(),
                None => {
                    self.crash();
                }
            }
        }
    }
}

fn control_object(handle: Weak<Inner>) -> Configurable {
    let h1 = handle.clone();
    let h2 = handle.clone();
    let h3 = handle;
    let upgrade = |w: &Weak<Inner>| -> Result<ProcessHandle> {
        w.upgrade()
            .map(|inner| ProcessHandle { inner })
            .ok_or_else(|| Error::comm_failure("process is gone"))
    };
    Configurable::builder(PROCESS_OBJECT, "process_control", Scope::Distributed)
        .concurrent("info", move |_| {
            let p = upgrade(&h1)?;
            reply(json!({
                "process": p.name(),
                "pid": std::process::id(),
                "category": p.spec().category,
                "objects": p.distributed_names(),
                "locals": p.local_names(),
            }))
        })
        .concurrent("inject", move |v| {
            let fault: Fault = args(v)?;
            let p = upgrade(&h2)?;
            // The reply must leave before a crash or a connection drop.
            let delayed = Fault {
                reply_delay_ms: None,
                ..fault.clone()
            };
            if let Some(ms) = fault.reply_delay_ms {
                p.inner.host.set_reply_delay(Duration::from_millis(ms));
            }
            if delayed.crash || delayed.drop_connections {
                thread::spawn(move || {
                    thread::sleep(Duration::from_millis(20));
                    p.inject(&delayed);
                });
            }
            Ok(Value::Null)
        })
        .concurrent("shutdown", move |_| {
            let p = upgrade(&h3)?;
            thread::spawn(move || {
                thread::sleep(Duration::from_millis(20));
                p.shutdown();
            });
            Ok(Value::Null)
        })
        .build()
}

/// Boots a process from its template: the generic main program.
///
/// Order: endpoint bound, framework clients created, `starting` reported,
/// manifest fetched, local then distributed configurables constructed,
/// distributed names registered, dispatcher started, ready hooks run,
/// `ready` reported, heartbeat started. A failure after `starting` is
/// reported as `failed` before the error is returned.
pub fn boot(template: ProcessTemplate, registry_ref: &ObjectRef, options: BootOptions) -> Result<ProcessHandle> {
    let spec = template.spec.clone();
    let host = Host::bind(&spec.name, &spec.endpoint.host, spec.endpoint.port)?;

    let registry = Arc::new(RegistryClient::new(registry_ref.clone(), options.policy.clone())?);
    let services = Arc::new(ServicesClient::new(registry_ref, options.policy.clone())?);
    let framework = Framework {
        process: spec.name.clone(),
        registry,
        services,
        sinks: Arc::new(RemoteSinks {
            policy: ConnectionPolicy::default(),
        }),
        policy: ConnectionPolicy::default(),
    };
    let proxy = SysmanProxy::new(
        &spec.name,
        registry_ref.with_object(SYSMAN_OBJECT)?,
        host.object_ref(PROCESS_OBJECT)?,
        options.policy.clone(),
    )?;
    let heartbeat = proxy.report(ProcState::Starting, None)?;

    let fail = |e: Error| -> Error {
        framework.log(Severity::Error, &format!("boot failed: {e}"));
        if let Err(r) = proxy.report(ProcState::Failed, Some(e.to_string())) {
            log::warn!("{}: failure not reported: {r}", spec.name);
        }
        host.kill();
        e
    };

    let built = (|| -> Result<_> {
        let manifest = framework.registry.manifest_for(&spec.name)?;
        let mut ctx = BuildContext::new(spec.clone(), host.advertised_host(), host.port(), Some(framework.clone()));
        let mut locals = Vec::new();
        for s in manifest.iter().filter(|s| s.scope == Scope::Local) {
            let obj = template.factory_for(Scope::Local).construct(s, &mut ctx)?;
            ctx.add_local(obj.clone());
            locals.push(obj);
        }
        let mut distributed = Vec::new();
        for s in manifest.iter().filter(|s| s.scope == Scope::Distributed) {
            let obj = template.factory_for(Scope::Distributed).construct(s, &mut ctx)?;
            distributed.push(obj.name().to_string());
            host.add_object(obj);
        }
        for name in &distributed {
            framework.registry.register(name, &host.object_ref(name)?)?;
        }
        Ok((ctx, locals, distributed))
    })();
    let (mut ctx, locals, distributed) = built.map_err(&fail)?;
    let (ready_hooks, shutdown_hooks) = ctx.take_hooks();

    let inner = Arc::new(Inner {
        spec: spec.clone(),
        host: host.clone(),
        framework: framework.clone(),
        proxy,
        locals,
        distributed,
        on_shutdown: Mutex::new(shutdown_hooks),
        life: Mutex::new(Lifecycle::Running),
        changed: Condvar::new(),
        on_crash: options.on_crash.clone(),
    });
    host.add_object(control_object(Arc::downgrade(&inner)));
    host.start(spec.worker_count);
    let handle = ProcessHandle { inner };

    let fail = |e: Error| -> Error {
        framework.log(Severity::Error, &format!("boot failed: {e}"));
        if let Err(r) = handle.inner.proxy.report(ProcState::Failed, Some(e.to_string())) {
            log::warn!("{}: failure not reported: {r}", spec.name);
        }
        handle.crash();
        e
    };
    for hook in ready_hooks {
        hook().map_err(&fail)?;
    }
    let heartbeat = handle
        .inner
        .proxy
        .report(ProcState::Ready, None)
        .map_err(&fail)?
        .or(heartbeat)
        .unwrap_or(Duration::from_millis(500));
    framework.log(Severity::Info, "ready");
    spawn_heartbeat(&handle, heartbeat);
    Ok(handle)
}

/// Sends `ready` twice per period so one slow report is not a miss.
fn spawn_heartbeat(handle: &ProcessHandle, period: Duration) {
    let weak = Arc::downgrade(&handle.inner);
    let sysman = handle.inner.proxy.client.current_ref();
    let name = handle.name().to_string();
    let control = handle.control_ref();
    let interval = (period / 2).max(Duration::from_millis(5));
    thread::Builder::new()
        .name(format!("{name}-heartbeat"))
        .spawn(move || {
            let Some(sysman) = sysman else { return };
            let policy = ConnectionPolicy::default().with_timeout_ms(period.as_millis().max(50) as u64);
            let Ok(proxy) = SysmanProxy::new(&name, sysman, control, policy) else {
                return;
            };
            loop {
                let Some(inner) = weak.upgrade() else { return };
                {
                    let mut life = inner.life.lock();
                    if *life == Lifecycle::Running {
                        inner.changed.wait_for(&mut life, interval);
                    }
                    if *life != Lifecycle::Running {
                        return;
                    }
                }
                drop(inner);
                if let Err(e) = proxy.report(ProcState::Ready, None) {
                    log::debug!("{name}: heartbeat not accepted: {e}");
                }
            }
        })
        .expect("spawn heartbeat thread");
}
