//! REST front end of the ctower control plane.

mod config;
mod error;
mod routes;

pub use config::{serve, Backend, ServerArgs};
pub use error::{status_for, ApiError};
pub use routes::{app, AppState, Auth, Route, ROUTES};
