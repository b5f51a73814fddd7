//! Pseudonymous, ticket-authorized reputation over homomorphically
//! encrypted state, with a deterministic simulator, transcript auditor and
//! operation benchmarks.
//!
//! Numeric code is generic over [`scalar::Scalar`]; the aliases below fix
//! the scalar to `f64`, which the protocol layer uses throughout.

pub mod bench;
pub mod crypto;
pub mod harness;
pub mod he;
pub mod identity;
pub mod protocol;
pub mod reputation;
pub mod scalar;

pub type Plain = he::PlainVector<f64>;
pub type Rating = reputation::RatingVector<f64>;
pub type History = reputation::FeedbackHistory<f64>;
pub type SimHe = he::SimBackend<f64>;
#[cfg(feature = "lattice")]
pub type LatticeHe = he::LatticeBackend<f64>;
