//! Three-party stack for direct edge-to-provider LLM invocation with
//! backend-issued short-lived tokens.

pub mod config;
pub mod backend;
pub mod baselines;
pub mod bench;
pub mod edge;
pub mod gateway;
pub mod net;
pub mod protocol;
pub mod scenarios;
pub mod stack;

pub use dynaseal_token as token;
