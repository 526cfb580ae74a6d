//! Command-line tools and the streaming policy service.

pub mod commands;
pub mod protocol;
pub mod server;
pub mod session;
