//! Command line entry points and the `/v1` HTTP service.

pub mod commands;
pub mod server;
