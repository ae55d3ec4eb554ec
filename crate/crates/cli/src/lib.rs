//! CLI entry points and the HTTP service around `layerforge-core`.

pub mod commands;
pub mod service;
