//! Host-side half of the TinyNav stack: file formats, world files, the
//! shared inference window, latency benchmarks, the websocket teleop
//! service and the `tinynav` command-line tool. The algorithms themselves
//! live in [`tinynav_core`], re-exported here as [`core`].

pub mod bench;
pub mod cli;
pub mod error;
pub mod formats;
pub mod service;
pub mod window_buffer;
pub mod world;

pub use error::{Error, FormatError, Result};
pub use tinynav_core as core;
