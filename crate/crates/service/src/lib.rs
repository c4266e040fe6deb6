//! Real-time teleoperation shielding server.
//!
//! Each websocket connection at `/ws` owns one simulated Dubins car. Client
//! action requests are sticky; every tick the request is filtered through the
//! configured monitor, the true plant is stepped with the executed action and
//! a tick frame is published.

pub mod protocol;
pub mod server;

pub use protocol::{parse_client, ClientMessage, ServerMessage};
pub use server::{router, run_session, spawn_server, AppState, ServiceConfig};
