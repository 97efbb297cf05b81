//! Service layer: CLI, reproducible run manifests, content-addressed store
//! and the HTTP API.

pub mod analysis;
pub mod api;
pub mod cli;
pub mod error;
pub mod runs;
pub mod store;
