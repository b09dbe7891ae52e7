//! HTTP service around the core crate: node registry, telemetry ingest,
//! scheduled monitoring, builds and address pools. A simulated fleet of
//! node agents is included for load and correctness testing.

pub mod api;
pub mod app;
pub mod config;
pub mod driver;
pub mod error;
pub mod fleet;
pub mod persist;

pub use app::{App, AppError, Clock, CreatedNode, NewNode, TelemetrySetup};
pub use config::{ServiceConfig, SimNodeProfile};
pub use driver::{serve, simulate, SimSummary};
pub use fleet::{Fleet, PushSink, TruthLog};
