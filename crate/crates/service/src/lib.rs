//! Intent lifecycle service: engine, persistence, HTTP API and CLI.

pub mod api;
pub mod backend;
pub mod cli;
pub mod config;
pub mod engine;
pub mod inventory;
pub mod store;

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/service.md")]
mod book {}
