//! Operator gateway: bridges the wire protocol to browser sessions over
//! HTTP and WebSocket, serves panel descriptors and style tokens, and is
//! the registered Director for every console subscription.

pub mod bridge;
pub mod http;
pub mod panels;
pub mod protocol;
pub mod styles;

pub use bridge::{
    Broadview, Gateway, GatewaySettings, ObjectNode, ProcessNode, SessionId, SessionInfo, SessionSub,
    DEFAULT_OUTBOX_BOUND, GATEWAY_TARGET,
};
pub use panels::{CommandSpec, Display, FieldLayout, PanelCatalog, PanelDescriptor, StreamSpec};
pub use protocol::{ClientMessage, MonitorParams, Payload, ServerMessage};
pub use styles::StyleTokens;

use iccs_core::kernel::{reply, Configurable, Factory, Scope};
use iccs_core::supervisory::with_update_method;
use serde_json::Value;

/// Type tag of the gateway's own distributed object.
pub const GATEWAY_TYPE: &str = "gateway";

/// Adds the gateway constructor to a device factory.
///
/// The object's params may override `outbox_bound` and `static_dir`. The
/// HTTP listener opens in a ready hook on the process's `http_port`, so
/// the process reports ready only once consoles can connect.
pub fn register(factory: Factory, settings: GatewaySettings) -> Factory {
    factory.with(GATEWAY_TYPE, move |spec, ctx| {
        let mut s = settings.clone();
        if let Some(n) = spec.params.get("outbox_bound").and_then(Value::as_u64) {
            s.outbox_bound = n as usize;
        }
        if let Some(d) = spec.params.get("static_dir").and_then(Value::as_str) {
            s.static_dir = Some(d.into());
        }
        let gw = Gateway::new(ctx.framework()?.clone(), ctx.self_ref(&spec.name)?, s)?;
        let addr = format!(
            "{}:{}",
            ctx.process().endpoint.host,
            ctx.process().http_port.unwrap_or(0)
        );
        let g = gw.clone();
        ctx.on_ready(move || {
            g.start_http(&addr)?;
            g.subscribe_alerts()?;
            Ok(())
        });
        let g = gw.clone();
        ctx.on_shutdown(move || g.stop());
        let (g1, g2, g3) = (gw.clone(), gw.clone(), gw.clone());
        Ok(
            with_update_method(Configurable::builder(&spec.name, GATEWAY_TYPE, Scope::Distributed), gw.clone())
                .concurrent("sessions", move |_| reply(g1.sessions()))
                .concurrent("broadview", move |_| reply(g2.broadview()?))
                .concurrent("http_addr", move |_| reply(g3.http_addr().map(|a| a.to_string())))
                .instance(gw)
                .build(),
        )
    })
}
