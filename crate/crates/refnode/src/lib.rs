//! Minimal instrumented DTN node: bundle codec, length-framed TCP
//! convergence layer, static forwarder and the test applications.

pub mod apps;
pub mod bundle;
pub mod cbor;
pub mod cl;
pub mod cli;
pub mod logsink;
pub mod node;

pub use bundle::{decode_bundle, encode_bundle, Bundle, CreationTimestamp, DecodeError, EncodeError};
pub use cl::{ClConnection, ClError};
pub use node::{Node, NodeConfig, NodeHandle};
