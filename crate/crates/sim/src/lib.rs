//! Simulator services around `carm-core`: configuration, file formats,
//! the session engine, record/replay, the WebSocket server and headless
//! studies.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod manifest;
pub mod operator;
pub mod pgm;
pub mod ply;
pub mod pose;
pub mod replay;
pub mod server;
pub mod session;
pub mod study;
