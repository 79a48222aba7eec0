//! HTTP host for interactive teleoperation sessions: commands over REST,
//! state frames over server-sent events, one JSONL event log per session.

pub mod api;
pub mod error;
pub mod session;

pub use api::{router, AppState};
pub use error::ServiceError;
pub use session::{recover_logs, Registry, ServiceConfig};
