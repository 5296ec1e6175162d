//! Service shell for route training: file-backed store, HTTP API, live
//! monitoring feed and the command-line workflows.

pub mod api;
pub mod config;
pub mod feed;
pub mod service;
pub mod store;
