//! Binary request/response protocol over TCP.
//!
//! Every frame is `len u32 LE | opcode u8 | request id u32 LE | payload`,
//! where `len` counts the opcode, id and payload bytes. See [`protocol`]
//! for payload layouts.

pub mod client;
pub mod protocol;
pub mod server;

pub use client::Client;
pub use protocol::{ErrorCode, Frame, LookupReply, Opcode, ProtocolError, Request};
pub use server::{Server, ServerConfig};
