//! Command-line front end and HTTP/SSE service for ADL programs.

pub mod cli;
pub mod server;

pub use cli::run;
