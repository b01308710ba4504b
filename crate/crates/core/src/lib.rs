//! Orchestration engine for real-time speech mediation experiments.
//!
//! A participant's utterance is transcribed, rewritten according to the
//! assigned content mode, and re-synthesized in the assigned voice. The crate
//! covers the session state machine, stage adapters, the mediation pipeline,
//! outbound audio pacing, counterbalanced trial plans, the provenance ledger,
//! and the WebSocket gateway.

pub mod adapters;
pub mod clock;
pub mod experiment;
pub mod ids;
pub mod pipeline;
pub mod provenance;
pub mod scheduler;
pub mod session;
pub mod protocol;
pub mod config;
pub mod coordinator;
pub mod corpus;
pub mod sim;
pub mod stats;
pub mod report;
pub mod gateway;
