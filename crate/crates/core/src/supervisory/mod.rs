//! Supervisory interactions: Directors (subscribers), LCUs (publishers that
//! are also subscribers), data mappers, and the attach/update protocol.

mod director;
mod lcu;
mod outbox;

pub use director::{with_update_method, Director, Entry, Record, Redelivery, Update, UpdateBody};
pub use lcu::{with_lcu_methods, DataMapper, Lcu, Publication, SubscriptionStatus};
pub use outbox::{
    DeliveryPolicy, FailureHook, LocalSinks, Outbox, RemoteSink, RemoteSinks, SinkFactory, UpdateSink,
};
