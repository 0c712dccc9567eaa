//! GRACYBUS: authenticated, fully distributed group key agreement for
//! broadcast buses, built on a TreeKEM-style ratchet tree and an epoch key
//! schedule, together with a deterministic bus simulator, scriptable
//! Dolev-Yao adversary, and a scenario runner that emits machine-readable
//! metrics.

pub mod crypto;
pub mod engine;
pub mod harness;
pub mod metrics;
pub mod pki;
pub mod scenario;
pub mod schedule;
pub mod sim;
pub mod tree;
pub mod wire;
