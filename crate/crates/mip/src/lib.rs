//! An event-sourced managed-information platform.
//!
//! Facts and rules flow through the platform as immutable events. Every event
//! carries a *writers set* (who may have stated it) and a *readers set* (who
//! may observe it), both expressed as [`interset::Interset`] values. Pure,
//! content-addressed rule modules ([`permastore`]) derive new facts from old
//! ones ([`rules`], [`engine`]); a [`gateway`] enforces integrity and
//! confidentiality generically; and a [`migrate`] planner replays history
//! through newly deployed logic. [`service`] ties everything into a runnable
//! server with a newline-delimited JSON wire protocol and a client kit.
//!
//! See the crate examples for a tour: each major capability has a runnable
//! example under `examples/`.

pub mod engine;
pub mod events;
pub mod gateway;
pub mod interset;
pub mod migrate;
pub mod permastore;
pub mod rules;
pub mod service;
pub mod store;
pub mod value;

pub use events::{Event, Kind};
pub use interset::{GroupTerm, Interset, SimpleInterset};
pub use value::Value;
