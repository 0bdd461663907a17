pub mod cli;
pub mod event_model;
pub mod memory;
pub mod metrics;
pub mod reasoner;
pub mod simulator;
pub mod stream_io;
pub mod trigger;
pub mod vlm_client;
