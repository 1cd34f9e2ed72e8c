//! HTTP API and command-line front end over `ams-core`.

pub mod api;
pub mod config;
pub mod error;
pub mod events;
pub mod service;

pub use api::{router, session_path};
pub use config::GatewayConfig;
pub use error::GatewayError;
pub use events::{EventFrame, EventKind, EventLog};
pub use service::{CloseSummary, Gateway, ReplayReport};
