//! Desk-scale simulator of backdoor attacks on federated prompt learning
//! with frozen dual-encoder models.
//!
//! Clients jointly learn a small prompt over a frozen random-projection
//! encoder pair; malicious clients alternate projected trigger steps with
//! poisoned prompt steps, and the server aggregates uploads under a
//! pluggable defense (plain averaging, Multi-Krum, Foolsgold, a
//! norm+cosine anomaly filter, or DP sanitization). Everything is
//! deterministic in one experiment seed.
//!
//! Start from the runnable examples:
//!
//! - `federated_attack`: end-to-end attacked federation, round by round
//! - `gradient_check`: finite-difference validation of the analytic grads
//! - `defense_showdown`: the same attack against every aggregation rule
//! - `heterogeneity`: Dirichlet label-skew partitions at several alphas
//! - `strip_screening`: entropy-based run-time input detection
//! - `stealth_report`: PSNR/SSIM quality of triggered images
//! - `bias_bound`: per-round attack-bias measurement vs. its budget
//! - `save_restore`: binary/JSON round-trips for prompts and triggers
//!
//! The same capabilities drive the `fedprompt` binary: `validate`, `run`,
//! and `report` over declarative TOML experiment files.

pub mod attack;
pub mod codec;
pub mod config;
pub mod data;
pub mod defenses;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod runner;

pub use error::{Error, Result};
