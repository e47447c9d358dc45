use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use iccs_core::conduit::{Client, ConnectionPolicy, ObjectRef};
use iccs_core::kernel::{args, reply, Framework};
use iccs_core::registry::{Category, FacilityConfig};
use iccs_core::services::AlertState;
use iccs_core::statusmon::MonitorSpec;
use iccs_core::supervisory::{Director, Redelivery, Update, UpdateBody};
use iccs_core::sysman::{SysmanClient, SYSMAN_OBJECT};
use iccs_core::{Error, Result};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::mpsc;

use crate::http::HttpServer;
use crate::panels::PanelCatalog;
use crate::protocol::{ClientMessage, MonitorParams, Payload, ServerMessage};
use crate::styles::StyleTokens;

/// Pseudo-target for session-level operations (reservations, alerts).
pub const GATEWAY_TARGET: &str = "__gateway";
pub const DEFAULT_OUTBOX_BOUND: usize = 1024;
/// Updates that arrive before their subscribe call has returned wait this long.
const ORPHAN_TTL: Duration = Duration::from_secs(5);

#[derive(Debug, Clone)]
pub struct GatewaySettings {
    pub panels: PanelCatalog,
    pub styles: StyleTokens,
    /// Pushes queued for one session before it is disconnected as too slow.
    pub outbox_bound: usize,
    /// Console build to serve; a placeholder page otherwise.
    pub static_dir: Option<PathBuf>,
    /// Policy for proxied invocations.
    pub policy: ConnectionPolicy,
}

impl Default for GatewaySettings {
    fn default() -> Self {
        GatewaySettings {
            panels: PanelCatalog::default(),
            styles: StyleTokens::default(),
            outbox_bound: DEFAULT_OUTBOX_BOUND,
            static_dir: None,
            policy: ConnectionPolicy::recovering(3),
        }
    }
}

pub type SessionId = u64;

/// One console subscription held by the gateway on a session's behalf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSub {
    pub subscription: u64,
    pub target: String,
    /// Mapper name or monitored field.
    pub stream: String,
    pub monitor: bool,
    /// Id assigned by the publisher.
    pub remote: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: SessionId,
    pub operator: String,
    pub subscriptions: Vec<SessionSub>,
    pub reservations: Vec<String>,
}

struct Session {
    operator: String,
    tx: mpsc::Sender<ServerMessage>,
    subs: BTreeMap<u64, SessionSub>,
    tokens: BTreeMap<String, String>,
}

/// (publisher, mapper or field, publisher-side subscription id)
type RouteKey = (String, String, u64);

#[derive(Default)]
struct State {
    sessions: HashMap<SessionId, Session>,
    routes: HashMap<RouteKey, (SessionId, u64)>,
    orphans: HashMap<RouteKey, (Instant, Vec<Update>)>,
}

/// What is left to undo remotely after a session ends.
struct Leftovers {
    subs: Vec<SessionSub>,
    tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectNode {
    pub name: String,
    pub type_tag: String,
    pub state: String,
    pub alerts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessNode {
    pub name: String,
    pub category: Category,
    pub state: String,
    pub alerts: usize,
    pub objects: Vec<ObjectNode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Broadview {
    pub facility: String,
    pub processes: Vec<ProcessNode>,
}

/// The gateway core: sessions, subscription routing, proxied invocation.
/// Transport-free; the HTTP layer drives it.
pub struct Gateway {
    framework: Framework,
    director: ObjectRef,
    settings: GatewaySettings,
    styles: RwLock<StyleTokens>,
    sysman: SysmanClient,
    state: Mutex<State>,
    redelivery: Redelivery,
    clients: Mutex<HashMap<String, Arc<Client>>>,
    config: OnceLock<FacilityConfig>,
    next_session: AtomicU64,
    next_sub: AtomicU64,
    http: Mutex<Option<HttpServer>>,
}

#[derive(Deserialize)]
struct DeviceArg {
    device: String,
}

#[derive(Deserialize)]
struct AlertArg {
    alert: u64,
}

impl Gateway {
    /// `director` is the gateway's own distributed object, the subscriber of
    /// every subscription it makes.
    pub fn new(framework: Framework, director: ObjectRef, settings: GatewaySettings) -> Result<Arc<Gateway>> {
        if settings.outbox_bound == 0 {
            return Err(Error::bad_args("outbox_bound must be at least 1"));
        }
        let sysman = SysmanClient::new(
            framework.registry.registry_ref().with_object(SYSMAN_OBJECT)?,
            ConnectionPolicy::default(),
        )?;
        Ok(Arc::new(Gateway {
            styles: RwLock::new(settings.styles.clone()),
            framework,
            director,
            settings,
            sysman,
            state: Mutex::new(State::default()),
            redelivery: Redelivery::new(),
            clients: Mutex::new(HashMap::new()),
            config: OnceLock::new(),
            next_session: AtomicU64::new(1),
            next_sub: AtomicU64::new(1),
            http: Mutex::new(None),
        }))
    }

    pub fn settings(&self) -> &GatewaySettings {
        &self.settings
    }

    pub fn director_ref(&self) -> &ObjectRef {
        &self.director
    }

    pub fn panels(&self) -> &PanelCatalog {
        &self.settings.panels
    }

    pub fn styles(&self) -> StyleTokens {
        self.styles.read().clone()
    }

    /// Takes effect on the next console load.
    pub fn set_styles(&self, styles: StyleTokens) {
        *self.styles.write() = styles;
    }

    /// Subscribes the gateway to facility alerts; they fan out to every session.
    pub fn subscribe_alerts(&self) -> Result<u64> {
        self.framework.services.subscribe_alerts(&self.director)
    }

    pub fn start_http(self: &Arc<Self>, addr: &str) -> Result<SocketAddr> {
        let server = HttpServer::start(self.clone(), addr)?;
        let bound = server.addr();
        if let Some(old) = self.http.lock().replace(server) {
            old.stop();
        }
        Ok(bound)
    }

    pub fn http_addr(&self) -> Option<SocketAddr> {
        self.http.lock().as_ref().map(HttpServer::addr)
    }

    /// Stops the listener and ends every session.
    pub fn stop(&self) {
        if let Some(s) = self.http.lock().take() {
            s.stop();
        }
        let ids: Vec<SessionId> = self.state.lock().sessions.keys().copied().collect();
        for id in ids {
            self.close_session(id);
        }
    }

    fn config(&self) -> Option<&FacilityConfig> {
        if let Some(c) = self.config.get() {
            return Some(c);
        }
        match self.framework.registry.config() {
            Ok(Some(c)) => Some(self.config.get_or_init(|| c)),
            Ok(None) => None,
            Err(e) => {
                log::warn!("gateway: configuration unavailable: {e}");
                None
            }
        }
    }

    fn type_tag_of(&self, object: &str) -> Option<String> {
        self.config()?
            .processes
            .iter()
            .flat_map(|p| &p.objects)
            .find(|o| o.name == object)
            .map(|o| o.type_tag.clone())
    }

    fn client(&self, target: &str) -> Result<Arc<Client>> {
        if let Some(c) = self.clients.lock().get(target) {
            return Ok(c.clone());
        }
        let c = Arc::new(self.framework.client(target, self.settings.policy.clone())?);
        Ok(self.clients.lock().entry(target.to_string()).or_insert(c).clone())
    }

    pub fn open_session(&self, operator: &str) -> (SessionId, mpsc::Receiver<ServerMessage>) {
        let id = self.next_session.fetch_add(1, Ordering::SeqCst);
        let (tx, rx) = mpsc::channel(self.settings.outbox_bound);
        self.state.lock().sessions.insert(
            id,
            Session {
                operator: operator.to_string(),
                tx,
                subs: BTreeMap::new(),
                tokens: BTreeMap::new(),
            },
        );
        (id, rx)
    }

    pub fn sessions(&self) -> Vec<SessionInfo> {
        let st = self.state.lock();
        let mut v: Vec<SessionInfo> = st
            .sessions
            .iter()
            .map(|(id, s)| SessionInfo {
                id: *id,
                operator: s.operator.clone(),
                subscriptions: s.subs.values().cloned().collect(),
                reservations: s.tokens.keys().cloned().collect(),
            })
            .collect();
        v.sort_by_key(|s| s.id);
        v
    }

    /// Ends a session: its subscriptions are detached and its reservations released.
    pub fn close_session(&self, id: SessionId) {
        let left = {
            let mut st = self.state.lock();
            Self::take_session(&mut st, id)
        };
        if let Some(left) = left {
            self.undo(left);
        }
    }

    fn take_session(st: &mut State, id: SessionId) -> Option<Leftovers> {
        let s = st.sessions.remove(&id)?;
        for sub in s.subs.values() {
            st.routes.remove(&(sub.target.clone(), sub.stream.clone(), sub.remote));
        }
        Some(Leftovers {
            subs: s.subs.into_values().collect(),
            tokens: s.tokens.into_values().collect(),
        })
    }

    fn undo(&self, left: Leftovers) {
        for sub in left.subs {
            if let Err(e) = self.end_remote(&sub) {
                log::debug!("gateway: cleanup of {} {}: {e}", sub.target, sub.stream);
            }
        }
        for t in left.tokens {
            let _ = self.framework.services.release(&t);
        }
    }

    fn end_remote(&self, sub: &SessionSub) -> Result<()> {
        self.redelivery.forget(&sub.target, sub.remote);
        let c = self.client(&sub.target)?;
        if sub.monitor {
            c.invoke("end_monitoring", json!({"monitor": sub.remote}))?;
        } else {
            c.invoke("detach", json!({"subscription": sub.remote}))?;
        }
        Ok(())
    }

    /// Queues a push; a full outbox ends the session.
    fn push(&self, st: &mut State, id: SessionId, msg: ServerMessage) -> bool {
        let Some(s) = st.sessions.get(&id) else {
            return false;
        };
        match s.tx.try_send(msg) {
            Ok(()) => true,
            Err(e) => {
                if let mpsc::error::TrySendError::Full(_) = e {
                    log::warn!("gateway: session {id} ({}) too slow, disconnecting", s.operator);
                }
                if let Some(left) = Self::take_session(st, id) {
                    self.undo_later(left);
                }
                false
            }
        }
    }

    fn undo_later(&self, left: Leftovers) {
        // Remote calls must not run under the state lock.
        let clients: Vec<(SessionSub, Result<Arc<Client>>)> =
            left.subs.into_iter().map(|s| {
                let c = self.client(&s.target);
                (s, c)
            }).collect();
        for (s, _) in &clients {
            self.redelivery.forget(&s.target, s.remote);
        }
        let services = self.framework.services.clone();
        std::thread::spawn(move || {
            for (sub, c) in clients {
                let Ok(c) = c else { continue };
                let r = if sub.monitor {
                    c.invoke("end_monitoring", json!({"monitor": sub.remote}))
                } else {
                    c.invoke("detach", json!({"subscription": sub.remote}))
                };
                if let Err(e) = r {
                    log::debug!("gateway: cleanup of {} {}: {e}", sub.target, sub.stream);
                }
            }
            for t in left.tokens {
                let _ = services.release(&t);
            }
        });
    }

    fn send(&self, id: SessionId, msg: ServerMessage) {
        let mut st = self.state.lock();
        self.push(&mut st, id, msg);
    }

    /// Handles one raw text frame from a console.
    pub fn handle_text(&self, session: SessionId, text: &str) {
        match serde_json::from_str::<ClientMessage>(text) {
            Ok(m) => self.handle(session, m),
            Err(e) => {
                let id = serde_json::from_str::<Value>(text)
                    .ok()
                    .and_then(|v| v.get("id").and_then(Value::as_u64));
                self.send(session, ServerMessage::error(id, &Error::bad_args(format!("bad message: {e}"))));
            }
        }
    }

    pub fn handle(&self, session: SessionId, msg: ClientMessage) {
        match msg {
            ClientMessage::Subscribe {
                id,
                target,
                mapper,
                monitor,
            } => {
                if let Err(e) = self.subscribe(session, id, &target, mapper, monitor) {
                    self.send(session, ServerMessage::error(Some(id), &e));
                }
            }
            ClientMessage::Unsubscribe { id, subscription } => {
                let r = self.unsubscribe(session, subscription).map(|_| Value::Null);
                self.send(session, ServerMessage::reply(id, r));
            }
            ClientMessage::Invoke {
                id,
                target,
                method,
                args,
            } => {
                let r = self.invoke(session, &target, &method, args);
                self.send(session, ServerMessage::reply(id, r));
            }
        }
    }

    fn subscribe(
        &self,
        session: SessionId,
        id: u64,
        target: &str,
        mapper: Option<String>,
        monitor: Option<MonitorParams>,
    ) -> Result<()> {
        if !self.state.lock().sessions.contains_key(&session) {
            return Err(Error::no_such_object(format!("no session {session}")));
        }
        self.framework.resolve(target)?;
        let c = self.client(target)?;
        let (stream, is_monitor, remote) = match (mapper, monitor) {
            (Some(m), None) => {
                let r = c.invoke("attach_mapper", json!({"mapper": m, "subscriber": self.director}))?;
                (m, false, r["subscription"].as_u64())
            }
            (None, Some(p)) => {
                let spec = MonitorSpec {
                    field: p.field.clone(),
                    precision: p.precision,
                    latency_ms: p.latency_ms,
                    subscriber: self.director.clone(),
                };
                let r = c.invoke("begin_monitoring", serde_json::to_value(&spec)?)?;
                (p.field, true, r["monitor"].as_u64())
            }
            _ => return Err(Error::bad_args("subscribe needs exactly one of mapper, monitor")),
        };
        let remote = remote.ok_or_else(|| Error::app(format!("{target} returned no subscription id")))?;
        let local = self.next_sub.fetch_add(1, Ordering::SeqCst);
        let sub = SessionSub {
            subscription: local,
            target: target.to_string(),
            stream: stream.clone(),
            monitor: is_monitor,
            remote,
        };
        let key = (target.to_string(), stream, remote);
        let mut st = self.state.lock();
        let Some(s) = st.sessions.get_mut(&session) else {
            drop(st);
            let _ = self.end_remote(&sub);
            return Ok(());
        };
        s.subs.insert(local, sub);
        st.routes.insert(key.clone(), (session, local));
        // The result goes out first so the console knows the id of the pushes that follow.
        if !self.push(&mut st, session, ServerMessage::Result {
            id,
            value: json!({ "subscription": local }),
        }) {
            return Ok(());
        }
        if let Some((_, early)) = st.orphans.remove(&key) {
            for u in early {
                if let Some(m) = Self::update_message(local, &u) {
                    if !self.push(&mut st, session, m) {
                        break;
                    }
                }
            }
        }
        Ok(())
    }

    fn unsubscribe(&self, session: SessionId, subscription: u64) -> Result<()> {
        let sub = {
            let mut st = self.state.lock();
            let s = st
                .sessions
                .get_mut(&session)
                .ok_or_else(|| Error::no_such_object(format!("no session {session}")))?;
            let sub = s
                .subs
                .remove(&subscription)
                .ok_or_else(|| Error::no_such_object(format!("no subscription {subscription}")))?;
            st.routes.remove(&(sub.target.clone(), sub.stream.clone(), sub.remote));
            sub
        };
        self.end_remote(&sub)
    }

    fn invoke(&self, session: SessionId, target: &str, method: &str, mut a: Value) -> Result<Value> {
        if target == GATEWAY_TARGET {
            return self.gateway_method(session, method, a);
        }
        let token = {
            let st = self.state.lock();
            let s = st
                .sessions
                .get(&session)
                .ok_or_else(|| Error::no_such_object(format!("no session {session}")))?;
            s.tokens.get(target).cloned()
        };
        let needs_token = self
            .type_tag_of(target)
            .is_some_and(|t| self.settings.panels.requires_reservation(&t, method));
        if needs_token {
            if a.is_null() {
                a = json!({});
            }
            // Only the session's own token counts; a client-supplied one is dropped.
            if let Some(obj) = a.as_object_mut() {
                match token {
                    Some(t) => obj.insert("token".into(), Value::String(t)),
                    None => obj.remove("token"),
                };
            }
        }
        self.client(target)?.invoke(method, a)
    }

    fn gateway_method(&self, session: SessionId, method: &str, a: Value) -> Result<Value> {
        let operator = self
            .state
            .lock()
            .sessions
            .get(&session)
            .map(|s| s.operator.clone())
            .ok_or_else(|| Error::no_such_object(format!("no session {session}")))?;
        let services = &self.framework.services;
        match method {
            "whoami" => Ok(json!({"session": session, "operator": operator})),
            "reserve" => {
                let d: DeviceArg = args(a)?;
                let r = services.reserve(&d.device, &operator)?;
                if let Some(s) = self.state.lock().sessions.get_mut(&session) {
                    s.tokens.insert(d.device.clone(), r.token);
                }
                Ok(json!({"device": r.device, "holder": r.holder}))
            }
            "release" => {
                let d: DeviceArg = args(a)?;
                let token = self
                    .state
                    .lock()
                    .sessions
                    .get_mut(&session)
                    .and_then(|s| s.tokens.remove(&d.device))
                    .ok_or_else(|| Error::bad_args(format!("{} is not reserved by this session", d.device)))?;
                services.release(&token)?;
                Ok(Value::Null)
            }
            "acknowledge" => {
                let x: AlertArg = args(a)?;
                reply(services.acknowledge(x.alert, &operator)?)
            }
            "alerts" => reply(services.alerts(Some(AlertState::Raised))?),
            "broadview" => reply(self.broadview()?),
            _ => Err(Error::new(
                iccs_core::ErrorCode::NoSuchMethod,
                format!("{GATEWAY_TARGET} has no method {method:?}"),
            )),
        }
    }

    fn update_message(local: u64, u: &Update) -> Option<ServerMessage> {
        let payload = match &u.body {
            UpdateBody::Record(entries) => Payload::Record(entries.clone()),
            UpdateBody::Report(r) => Payload::Report(r.clone()),
            UpdateBody::Alert(_) => return None,
        };
        Some(ServerMessage::Update {
            subscription: local,
            target: u.publisher.clone(),
            stream: u.mapper.clone(),
            seq: u.seq,
            payload,
        })
    }

    /// Processes, their distributed objects, states and raised-alert counts.
    pub fn broadview(&self) -> Result<Broadview> {
        let Some(cfg) = self.config() else {
            return Ok(Broadview {
                facility: String::new(),
                processes: vec![],
            });
        };
        let states: HashMap<String, String> = self
            .sysman
            .query_states()?
            .into_iter()
            .map(|r| (r.name, r.state.as_str().to_string()))
            .collect();
        let mut alerts: HashMap<String, usize> = HashMap::new();
        for a in self.framework.services.alerts(Some(AlertState::Raised))? {
            *alerts.entry(a.event.source).or_default() += 1;
        }
        let count = |n: &str| alerts.get(n).copied().unwrap_or(0);
        let processes = cfg
            .processes
            .iter()
            .map(|p| {
                let state = states.get(&p.name).cloned().unwrap_or_else(|| "pending".into());
                let objects: Vec<ObjectNode> = p
                    .objects
                    .iter()
                    .filter(|o| o.scope == iccs_core::kernel::Scope::Distributed)
                    .map(|o| ObjectNode {
                        name: o.name.clone(),
                        type_tag: o.type_tag.clone(),
                        state: state.clone(),
                        alerts: count(&o.name),
                    })
                    .collect();
                ProcessNode {
                    name: p.name.clone(),
                    category: p.category,
                    alerts: count(&p.name) + objects.iter().map(|o| o.alerts).sum::<usize>(),
                    state,
                    objects,
                }
            })
            .collect();
        Ok(Broadview {
            facility: cfg.facility_name.clone(),
            processes,
        })
    }

    fn broadcast_alert(&self, u: &Update) {
        let UpdateBody::Alert(alert) = &u.body else { return };
        let mut st = self.state.lock();
        let ids: Vec<SessionId> = st.sessions.keys().copied().collect();
        for id in ids {
            self.push(&mut st, id, ServerMessage::Alert { alert: alert.clone() });
        }
    }
}

impl Director for Gateway {
    fn update(&self, u: Update) -> Result<()> {
        if matches!(u.body, UpdateBody::Alert(_)) {
            self.broadcast_alert(&u);
            return Ok(());
        }
        if !self.redelivery.admit(&u) {
            return Ok(());
        }
        let key = (u.publisher.clone(), u.mapper.clone(), u.subscription);
        let mut st = self.state.lock();
        match st.routes.get(&key).copied() {
            Some((session, local)) => {
                if let Some(m) = Self::update_message(local, &u) {
                    self.push(&mut st, session, m);
                }
            }
            None => {
                let now = Instant::now();
                st.orphans.retain(|_, (t, _)| now.duration_since(*t) < ORPHAN_TTL);
                st.orphans.entry(key).or_insert_with(|| (now, Vec::new())).1.push(u);
            }
        }
        Ok(())
    }
}
