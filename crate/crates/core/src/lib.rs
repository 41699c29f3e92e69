//! Desk-scale multi-objective preference alignment.
//!
//! Tiny tabular autoregressive policies over an exactly enumerable response
//! space, synthetic ground-truth rewards, DPO-family training objectives,
//! multi-objective decoding, the self-improving Pareto-optimal response
//! pipeline, and Pareto-front evaluation.

pub mod align;
pub mod decode;
pub mod error;
pub mod eval;
pub mod harness;
pub mod par;
pub mod policy;
pub mod prefdata;
pub mod reward;
pub mod rng;
pub mod sipo;
pub mod weight;

pub use error::{Error, Result};
pub use policy::{enumerate_responses, merge_params, EnvSpec, PromptId, Response, TabularPolicy, TokenId};
pub use weight::WeightVector;
