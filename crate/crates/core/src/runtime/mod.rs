//! Deployable shell around the protocol: the multi-session map server,
//! transports between devices and server, and the device-side pipeline.

mod client;
mod server;
mod transport;

pub use client::{run_client, ClientConfig, ClientPipeline, ClientReport, Mode, PipelineError, UploadRecord};
pub use server::{query_for, response_degree, Connection, LatencySummary, Reply, Server, ServerConfig, ServerEvent, SessionState};
pub use transport::{
    serve, spawn_local, FlakyTransport, InProcessTransport, TcpTransport, ThrottledTransport, TokenBucket, Transport, TransportError,
};
