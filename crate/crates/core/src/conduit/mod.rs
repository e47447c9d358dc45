//! Framed point-to-point messaging, object references, and the connection
//! abstraction with its failure-recovery behaviours.
//!
//! Wire format: every message is a 4-byte big-endian length followed by a
//! UTF-8 JSON [`Envelope`]. Replies are matched to calls by a per-connection
//! id that starts at 1.

mod client;
mod connection;
mod envelope;
mod frame;
mod reference;
mod server;

pub use client::{
    ping, AttemptFailure, AttemptObserver, AttemptStage, Client, ConnectionPolicy, Resolver, Target,
    PING_METHOD,
};
pub use connection::{Connection, PendingCall};
pub use envelope::{Body, Envelope};
pub use frame::{decode_frame, encode_frame, read_frame, write_frame, MAX_FRAME_LEN};
pub use reference::{format_ref, parse_ref, ObjectRef};
pub use server::{Inbox, IncomingCall, Listener, Responder};
