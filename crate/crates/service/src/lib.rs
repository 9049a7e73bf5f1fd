//! Command-line driver and HTTP review service for the `ical` engine.

pub mod api;
pub mod cli;
pub mod events;
pub mod manager;
