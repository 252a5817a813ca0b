//! Loopback HTTP plumbing shared by every party: a metering listener for the
//! servers and a small HTTP/1.1 client for outbound calls.

mod client;
mod meter;
mod server;

pub use client::{HttpClient, HttpResponse, TransportError};
pub use meter::{ByteCount, ByteCounter, CountingListener, Party, TrafficMeter};
pub use server::{spawn_service, ServiceHandle};
