//! HTTP transport for the denoiser contract: a blocking client that any
//! orchestrator job can use as a [`Denoiser`], and a reference server.

pub mod client;
pub mod server;
pub mod wire;

pub use client::{health_check, RemoteDenoiser, DEFAULT_TIMEOUT};
pub use server::{router, serve, ServerHandle};
