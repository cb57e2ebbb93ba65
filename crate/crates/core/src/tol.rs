//! Tolerances shared by validation, certificates and tests.

/// Probability vectors must sum to one within this bound.
pub const MASS: f64 = 1e-12;

/// Residual allowed in martingale identities of certificates.
pub const MARTINGALE: f64 = 1e-9;

/// LP slack below which a strict consistent price system is not certified.
pub const LP_SLACK: f64 = 1e-10;

/// Residual allowed when comparing closed-form clamp identities.
pub const CLAMP: f64 = 1e-12;
