//! The generic main program: two factories, boot sequence, and the bounded
//! FIFO dispatcher that executes incoming calls.

mod boot;
mod dispatch;
mod factory;
mod host;
mod object;

pub use boot::{boot, BootOptions, CrashHook, Fault, Lifecycle, ProcessHandle, ProcessTemplate, SysmanProxy, PROCESS_OBJECT};
pub use dispatch::{Dispatcher, StartRecord};
pub use factory::{BuildContext, Constructor, Extension, Factory, Framework, BOOT_CALL_TIMEOUT};
pub use host::Host;
pub use object::{args, reply, Configurable, ConfigurableBuilder, Handler, Scope};
