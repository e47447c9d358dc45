use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Weak};
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::Deserialize;
use serde_json::{json, Value};

use super::launch::{ChildProcess, Launcher};
use super::record::{legal, plan, ProcState, ProcessRecord, Report, StartPlan};
use crate::conduit::{Client, ConnectionPolicy, ObjectRef};
use crate::error::{Error, Result};
use crate::kernel::{args, reply, Configurable, Host, Scope};
use crate::registry::{now_ms, registry_object, FacilityConfig, Registry, REGISTRY_OBJECT};
use crate::services::{events_object, log_object, reservations_object, AlertSeverity, Services, Severity};

pub const SYSMAN_OBJECT: &str = "__sysman";
/// Event emitted on every process state transition.
pub const STATE_EVENT: &str = "process_state";
/// Critical alert raised once per unscheduled failure.
pub const FAILED_ALERT: &str = "process_failed";
pub const LAUNCH_HALTED_ALERT: &str = "launch_halted";

#[derive(Debug, Clone)]
pub struct SysmanOptions {
    pub heartbeat: Duration,
    /// Consecutive missed periods before a ready process is declared failed.
    pub missed_limit: u32,
    /// Relaunch failed processes.
    pub restart: bool,
    /// How long a launch phase may take to become ready.
    pub phase_timeout: Duration,
    pub worker_count: usize,
}

impl Default for SysmanOptions {
    fn default() -> Self {
        SysmanOptions {
            heartbeat: Duration::from_millis(500),
            missed_limit: 3,
            restart: false,
            phase_timeout: Duration::from_secs(30),
            worker_count: 16,
        }
    }
}

/// The central system manager. Hosts the name service and the shared
/// service stores in the same process.
pub struct Central {
    config: FacilityConfig,
    options: SysmanOptions,
    host: Arc<Host>,
    registry: Arc<Registry>,
    services: Arc<Services>,
    records: Mutex<BTreeMap<String, ProcessRecord>>,
    changed: Condvar,
    launcher: Option<Arc<dyn Launcher>>,
    children: Mutex<HashMap<String, Box<dyn ChildProcess>>>,
    stopping: AtomicBool,
}

impl Central {
    /// Binds the configured sysman endpoint (port 0 picks one) and starts
    /// serving `__registry`, `__sysman` and the service objects, plus the
    /// watch loop. Nothing is launched yet.
    pub fn start(
        config: FacilityConfig,
        options: SysmanOptions,
        launcher: Option<Arc<dyn Launcher>>,
    ) -> Result<Arc<Central>> {
        config.validate()?;
        let host = Host::bind("sysman", &config.sysman.host, config.sysman.port)?;
        let registry = Arc::new(Registry::with_config(config.clone()));
        let services = Arc::new(Services::default());
        let records = config
            .processes
            .iter()
            .map(|p| (p.name.clone(), ProcessRecord::new(&p.name, p.category)))
            .collect();
        let central = Arc::new(Central {
            config,
            options,
            host: host.clone(),
            registry: registry.clone(),
            services: services.clone(),
            records: Mutex::new(records),
            changed: Condvar::new(),
            launcher,
            children: Mutex::new(HashMap::new()),
            stopping: AtomicBool::new(false),
        });
        host.add_object(registry_object(registry));
        host.add_object(log_object(services.clone()));
        host.add_object(events_object(services.clone()));
        host.add_object(reservations_object(services));
        host.add_object(sysman_object(Arc::downgrade(&central)));
        host.start(central.options.worker_count);
        spawn_watch(Arc::downgrade(&central));
        Ok(central)
    }

    pub fn config(&self) -> &FacilityConfig {
        &self.config
    }

    pub fn options(&self) -> &SysmanOptions {
        &self.options
    }

    pub fn host(&self) -> &Arc<Host> {
        &self.host
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    pub fn services(&self) -> &Arc<Services> {
        &self.services
    }

    pub fn registry_ref(&self) -> ObjectRef {
        self.host
            .object_ref(REGISTRY_OBJECT)
            .expect("framework names are valid tokens")
    }

    pub fn sysman_ref(&self) -> ObjectRef {
        self.host
            .object_ref(SYSMAN_OBJECT)
            .expect("framework names are valid tokens")
    }

    pub fn plan(&self) -> StartPlan {
        plan(&self.config)
    }

    /// Records in configuration order.
    pub fn states(&self) -> Vec<ProcessRecord> {
        let recs = self.records.lock();
        self.config
            .processes
            .iter()
            .filter_map(|p| recs.get(&p.name).cloned())
            .collect()
    }

    pub fn state_of(&self, process: &str) -> Option<ProcState> {
        self.records.lock().get(process).map(|r| r.state)
    }

    fn emit_transition(&self, process: &str, from: ProcState, to: ProcState) {
        self.services
            .events
            .emit(STATE_EVENT, process, json!({"state": to, "from": from}));
    }

    /// Applies a process's self-report. Returns the heartbeat period.
    pub fn report(&self, r: Report) -> Result<Value> {
        let mut failed = None;
        {
            let mut recs = self.records.lock();
            let rec = recs
                .get_mut(&r.process)
                .ok_or_else(|| Error::no_such_object(format!("unknown process {:?}", r.process)))?;
            let from = rec.state;
            if !legal(from, r.state) {
                return Err(Error::bad_args(format!(
                    "{}: illegal transition {} -> {}",
                    r.process,
                    from.as_str(),
                    r.state.as_str()
                )));
            }
            if r.control.is_some() {
                rec.control = r.control.clone();
            }
            if r.pid.is_some() && rec.pid.is_none() {
                rec.pid = r.pid;
            }
            match r.state {
                ProcState::Ready => rec.last_heartbeat = Some(now_ms()),
                ProcState::Failed => {
                    failed = Some(r.error.clone().unwrap_or_else(|| "reported failure".into()));
                }
                _ => {}
            }
            if r.state != ProcState::Failed && from != r.state {
                rec.state = r.state;
                if r.state == ProcState::Stopped {
                    self.registry.remove_process(&r.process);
                }
                self.emit_transition(&r.process, from, r.state);
                if r.state == ProcState::Ready {
                    self.services.log.append("sysman", Severity::Info, &format!("{} ready", r.process));
                }
            }
        }
        if let Some(reason) = failed {
            self.fail(&r.process, &reason);
        }
        self.changed.notify_all();
        Ok(json!({ "heartbeat_ms": self.options.heartbeat.as_millis() as u64 }))
    }

    /// Marks a process failed: one event, one critical alert, its names
    /// removed from the name service, the child terminated. No-op if the
    /// process is already failed or stopped.
    pub fn fail(&self, process: &str, reason: &str) -> bool {
        self.fail_with(process, reason, true)
    }

    fn fail_with(&self, process: &str, reason: &str, may_restart: bool) -> bool {
        let removed = {
            let mut recs = self.records.lock();
            let Some(rec) = recs.get_mut(process) else {
                return false;
            };
            if rec.state.is_terminal() {
                return false;
            }
            let from = rec.state;
            rec.state = ProcState::Failed;
            rec.reason = Some(reason.to_string());
            self.emit_transition(process, from, ProcState::Failed);
            // Names go before anyone can observe the failed state.
            self.registry.remove_process(process)
        };
        self.changed.notify_all();
        self.services.log.append(
            "sysman",
            Severity::Error,
            &format!("{process} failed: {reason}; removed {} names", removed.len()),
        );
        self.services.events.raise_alert(
            FAILED_ALERT,
            process,
            json!({"process": process, "reason": reason}),
            AlertSeverity::Critical,
        );
        if let Some(mut child) = self.children.lock().remove(process) {
            child.kill();
        }
        if may_restart && self.options.restart && !self.stopping.load(Ordering::SeqCst) {
            if let Err(e) = self.spawn(process) {
                log::warn!("relaunch of {process} failed: {e}");
            }
        }
        true
    }

    fn spawn(&self, process: &str) -> Result<()> {
        let launcher = self
            .launcher
            .clone()
            .ok_or_else(|| Error::app("no launcher configured"))?;
        let spec = self
            .config
            .process(process)
            .cloned()
            .ok_or_else(|| Error::no_such_object(format!("unknown process {process:?}")))?;
        {
            let mut recs = self.records.lock();
            let rec = recs.get_mut(process).expect("records mirror the config");
            if rec.state != ProcState::Pending {
                let from = rec.state;
                *rec = ProcessRecord {
                    launches: rec.launches,
                    ..ProcessRecord::new(process, spec.category)
                };
                self.emit_transition(process, from, ProcState::Pending);
            }
            rec.launches += 1;
        }
        match launcher.spawn(&spec, &self.registry_ref()) {
            Ok(child) => {
                if let Some(pid) = child.id() {
                    if let Some(r) = self.records.lock().get_mut(process) {
                        r.pid.get_or_insert(pid);
                    }
                }
                self.children.lock().insert(process.to_string(), child);
                Ok(())
            }
            Err(e) => {
                self.fail_with(process, &e.to_string(), false);
                Err(e)
            }
        }
    }

    /// Starts every process phase by phase. A phase begins only when every
    /// process of the previous phase is ready.
    pub fn launch(&self) -> Result<()> {
        let plan = self.plan();
        if plan.phases.iter().all(Vec::is_empty) {
            return Ok(());
        }
        for (i, phase) in plan.phases.iter().enumerate() {
            for name in phase {
                if let Err(e) = self.spawn(name) {
                    return Err(self.halt(i, name, &e.to_string()));
                }
            }
            let deadline = Instant::now() + self.options.phase_timeout;
            let mut recs = self.records.lock();
            loop {
                if let Some(bad) = phase.iter().find(|n| recs[n.as_str()].state.is_terminal()) {
                    let bad = bad.clone();
                    drop(recs);
                    return Err(self.halt(i, &bad, "did not become ready"));
                }
                if phase.iter().all(|n| recs[n.as_str()].state == ProcState::Ready) {
                    break;
                }
                if self.changed.wait_until(&mut recs, deadline).timed_out() {
                    let late: Vec<String> = phase
                        .iter()
                        .filter(|n| recs[n.as_str()].state != ProcState::Ready)
                        .cloned()
                        .collect();
                    drop(recs);
                    for n in &late {
                        self.fail(n, "not ready within phase timeout");
                    }
                    return Err(self.halt(i, &late.join(","), "phase timeout"));
                }
            }
        }
        Ok(())
    }

    fn halt(&self, phase: usize, process: &str, why: &str) -> Error {
        self.services.events.raise_alert(
            LAUNCH_HALTED_ALERT,
            "sysman",
            json!({"phase": phase + 1, "process": process, "reason": why}),
            AlertSeverity::Critical,
        );
        Error::app(format!("launch halted in phase {}: {process} {why}", phase + 1))
    }

    /// Blocks until `process` reaches `state` or the timeout passes.
    pub fn wait_state(&self, process: &str, state: ProcState, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut recs = self.records.lock();
        loop {
            match recs.get(process) {
                Some(r) if r.state == state => return true,
                None => return false,
                _ => {}
            }
            if self.changed.wait_until(&mut recs, deadline).timed_out() {
                return recs.get(process).is_some_and(|r| r.state == state);
            }
        }
    }

    fn control_client(&self, process: &str) -> Result<Client> {
        let recs = self.records.lock();
        let rec = recs
            .get(process)
            .ok_or_else(|| Error::no_such_object(format!("unknown process {process:?}")))?;
        let control = rec
            .control
            .clone()
            .filter(|_| !rec.state.is_terminal())
            .ok_or_else(|| Error::no_such_object(format!("{process} is not running")))?;
        Ok(Client::to_ref(control))
    }

    /// Forwards a fault to the named process's control object.
    pub fn inject(&self, process: &str, fault: Value) -> Result<Value> {
        self.control_client(process)?.invoke("inject", fault)
    }

    /// Asks one process to stop gracefully.
    pub fn request_shutdown(&self, process: &str) -> Result<()> {
        self.control_client(process)?.invoke("shutdown", Value::Null)?;
        Ok(())
    }

    /// Stops every process, gateways first, then terminates leftovers.
    pub fn shutdown_all(&self, grace: Duration) {
        self.stopping.store(true, Ordering::SeqCst);
        for phase in self.plan().phases.iter().rev() {
            for name in phase {
                let _ = self.request_shutdown(name);
            }
            for name in phase {
                if !self.state_of(name).is_some_and(ProcState::is_terminal) {
                    self.wait_state(name, ProcState::Stopped, grace);
                }
            }
        }
        self.kill_children();
    }

    fn kill_children(&self) {
        let children: Vec<_> = self.children.lock().drain().collect();
        for (_, mut c) in children {
            c.kill();
        }
    }

    /// Stops the watch loop, terminates children and closes the endpoint.
    pub fn stop(&self) {
        self.stopping.store(true, Ordering::SeqCst);
        self.kill_children();
        self.host.kill();
    }

    pub fn is_stopping(&self) -> bool {
        self.stopping.load(Ordering::SeqCst)
    }

    fn watch_once(&self) {
        let exited: Vec<(String, String)> = {
            let mut children = self.children.lock();
            let mut out = Vec::new();
            children.retain(|name, c| match c.try_exit() {
                Some(desc) => {
                    out.push((name.clone(), desc));
                    false
                }
                None => true,
            });
            out
        };
        for (name, desc) in exited {
            self.fail(&name, &format!("exited: {desc}"));
        }
        let limit = self.options.heartbeat.as_millis() as u64 * self.options.missed_limit as u64;
        let now = now_ms();
        let missed: Vec<String> = self
            .records
            .lock()
            .values()
            .filter(|r| r.state == ProcState::Ready)
            .filter(|r| r.last_heartbeat.is_some_and(|t| now.saturating_sub(t) > limit))
            .map(|r| r.name.clone())
            .collect();
        for name in missed {
            self.fail(&name, &format!("missed {} heartbeats", self.options.missed_limit));
        }
    }
}

impl Drop for Central {
    fn drop(&mut self) {
        self.stop();
    }
}

fn spawn_watch(central: Weak<Central>) {
    thread::Builder::new()
        .name("sysman-watch".into())
        .spawn(move || loop {
            let tick = match central.upgrade() {
                Some(c) if !c.is_stopping() => {
                    c.watch_once();
                    (c.options.heartbeat / 5).max(Duration::from_millis(5))
                }
                _ => return,
            };
            thread::sleep(tick);
        })
        .expect("spawn watch thread");
}

#[derive(Deserialize)]
struct ProcessArg {
    process: String,
}

#[derive(Deserialize)]
struct InjectArgs {
    process: String,
    fault: Value,
}

fn sysman_object(central: Weak<Central>) -> Configurable {
    let get = move || -> Result<Arc<Central>> {
        central
            .upgrade()
            .ok_or_else(|| Error::comm_failure("system manager is shutting down"))
    };
    let (g1, g2, g3, g4, g5) = (get.clone(), get.clone(), get.clone(), get.clone(), get);
    Configurable::builder(SYSMAN_OBJECT, "system_manager", Scope::Distributed)
        .concurrent("report", move |v| g1()?.report(args(v)?))
        .concurrent("query_states", move |_| reply(g2()?.states()))
        .concurrent("plan", move |_| reply(g3()?.plan()))
        .concurrent("inject", move |v| {
            let a: InjectArgs = args(v)?;
            g4()?.inject(&a.process, a.fault)
        })
        .concurrent("shutdown", move |v| {
            let a: ProcessArg = args(v)?;
            g5()?.request_shutdown(&a.process)?;
            Ok(Value::Null)
        })
        .build()
}

/// Client for `__sysman`.
pub struct SysmanClient {
    client: Client,
}

impl SysmanClient {
    pub fn new(sysman: ObjectRef, policy: ConnectionPolicy) -> Result<Self> {
        Ok(SysmanClient {
            client: Client::new(crate::conduit::Target::Ref(sysman), policy, None)?,
        })
    }

    pub fn query_states(&self) -> Result<Vec<ProcessRecord>> {
        args(self.client.invoke("query_states", Value::Null)?)
    }

    pub fn inject(&self, process: &str, fault: Value) -> Result<Value> {
        self.client
            .invoke("inject", json!({"process": process, "fault": fault}))
    }

    pub fn shutdown(&self, process: &str) -> Result<()> {
        self.client
            .invoke("shutdown", json!({ "process": process }))
            .map(|_| ())
    }
}
