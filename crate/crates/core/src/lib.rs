//! In-context abstraction learning for agents that act through skill-call
//! programs: turning noisy demonstrations into annotated examples, refining
//! them with human feedback, and retrieving them at deployment time.

pub mod abstraction;
pub mod backend;
pub mod config;
pub mod deploy;
pub mod engine;
pub mod hitl;
pub mod image;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod prompt;
pub mod sim;
