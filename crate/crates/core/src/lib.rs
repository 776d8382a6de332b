//! Multiuser detection for randomly spread CDMA.
//!
//! The crate simulates the synchronous binary-input channel in which `K`
//! users transmit bits through random binary spreading codes of length `N`
//! and the receiver sees their superposition in Gaussian noise. On top of
//! the channel model it provides:
//!
//! - an exact posterior oracle (marginal-posterior-mode detection by
//!   enumeration) for small systems,
//! - an iterative survey-propagation detector in its Gaussian-approximated
//!   form, with belief propagation as the zero-tilt special case and a
//!   matched filter as the classical baseline,
//! - macroscopic trajectory recording, fixed-point summaries across system
//!   sizes, and a two-replica probe for the dynamical instability of the
//!   iteration,
//! - a command-line front end for seeded, reproducible experiments.
//!
//! Everything downstream of an instance seed is deterministic: rebuilding
//! an instance from its seed or its JSON serialization reproduces the
//! received signal bit for bit, and detector trajectories are identical
//! across runs.

pub mod analysis;
pub mod cli;
pub mod detector;
pub mod error;
pub mod model;
pub mod quad;

pub use analysis::{
    fixed_point_summary, majority_verdict, record_trace, two_replica_probe, Estimate,
    FixedPointSummary, GroupAgreement, GroupStats, MacroRecord, MacroTrace, ProbeWindow,
    StabilityEntry, StabilityReport, SummaryGroup, Verdict,
};
pub use detector::{
    bp_detect, detect, horizontal_update, init_state, init_state_from_means, matched_filter,
    vertical_update, vertical_update_with_rule, DetectionResult, DetectorConfig, DetectorState,
    Mode,
};
pub use error::{Error, Result};
pub use model::{
    exact_cavity_field, exact_cavity_field_capped, exhaustive_mpm, exhaustive_mpm_capped,
    generate_instance, log_likelihood, sign_decision, Instance, PosteriorQuery, SpreadingMatrix,
    DEFAULT_BRUTE_CAP,
};
pub use quad::{build_rule, tilted_moments, QuadratureRule, TiltedMomentRequest};
