//! Simulation of contract-governed data sharing: a hash-chained ledger, a
//! one-time-link cloud store, negotiated terms, escrow contracts and breach
//! voting.

pub mod cloudnode;
pub mod congress;
pub mod cryptopipe;
pub mod datashare;
pub mod ledger;
pub mod negotiation;
pub mod scenario;
