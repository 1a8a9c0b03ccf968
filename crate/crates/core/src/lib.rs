//! Stateless proof-of-work puzzles for real-time online fraud preemption.
//!
//! Each user activity (a review, a like) is scored for fraud from the
//! co-activity graph of its subject, the score is turned into a time
//! penalty, and the penalty into a double-SHA-256 puzzle sized to the
//! acting device's hashrate. Puzzles are authenticated by an HMAC cookie so
//! the service keeps no per-puzzle state, and each user's (or fraud
//! cluster's) puzzles carry accumulating timeouts that serialize its
//! activities.

pub mod classifier;
pub mod cookie;
pub mod error;
pub mod exec;
pub mod graph;
pub mod hashrate;
pub mod penalty;
pub mod puzzle;
pub mod service;
pub mod sim;

pub use exec::Exec;
