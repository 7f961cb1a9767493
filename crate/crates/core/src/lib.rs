pub mod bench;
pub mod events;
pub mod fixtures;
mod hash;
pub mod orchestrator;
pub mod plan;
pub mod provider;
pub mod rank;
pub mod sandbox;
pub mod session;
pub mod templates;
pub mod tools;
pub mod trials;
