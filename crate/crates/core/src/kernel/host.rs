use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use super::dispatch::Dispatcher;
use super::object::Configurable;
use crate::conduit::{IncomingCall, Listener, ObjectRef};
use crate::error::Result;

/// A listening endpoint plus the dispatcher that executes its calls.
pub struct Host {
    process: String,
    advertise: String,
    listener: Listener,
    dispatcher: Dispatcher,
    killed: AtomicBool,
}

impl Host {
    /// Binds `bind_host:port` (port 0 picks a free port). Calls received
    /// before [`Host::start`] are queued.
    pub fn bind(process: &str, bind_host: &str, port: u16) -> Result<Arc<Host>> {
        let listener = Listener::bind(&format!("{bind_host}:{port}"))?;
        let advertise = if bind_host == "0.0.0.0" {
            "127.0.0.1".to_string()
        } else {
            bind_host.to_string()
        };
        let host = Arc::new(Host {
            process: process.to_string(),
            advertise,
            listener,
            dispatcher: Dispatcher::new(),
            killed: AtomicBool::new(false),
        });
        let d = host.dispatcher.clone();
        host.listener
            .serve(Arc::new(move |call: IncomingCall| d.deliver(call)))?;
        Ok(host)
    }

    pub fn process(&self) -> &str {
        &self.process
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr()
    }

    pub fn port(&self) -> u16 {
        self.local_addr().port()
    }

    pub fn advertised_host(&self) -> &str {
        &self.advertise
    }

    pub fn object_ref(&self, object: &str) -> Result<ObjectRef> {
        ObjectRef::new(self.advertise.clone(), self.port(), self.process.clone(), object)
    }

    pub fn dispatcher(&self) -> &Dispatcher {
        &self.dispatcher
    }

    pub fn add_object(&self, object: Configurable) {
        self.dispatcher.add_object(object);
    }

    pub fn start(&self, worker_count: usize) {
        self.dispatcher.start(worker_count);
    }

    pub fn drop_connections(&self) {
        self.listener.drop_connections();
    }

    pub fn set_reply_delay(&self, delay: Duration) {
        self.listener.set_reply_delay(delay);
    }

    /// Abrupt stop: no more accepts, connections closed, queued calls dropped.
    pub fn kill(&self) {
        if self.killed.swap(true, Ordering::SeqCst) {
            return;
        }
        self.dispatcher.stop();
        self.listener.shutdown();
    }

    pub fn is_killed(&self) -> bool {
        self.killed.load(Ordering::SeqCst)
    }
}

impl Drop for Host {
    fn drop(&mut self) {
        self.kill();
    }
}
