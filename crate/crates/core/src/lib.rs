//! Two-stage causal representation learning for event causality
//! identification.
//!
//! Stage one ([`selfrl`]) learns statement representations from external
//! causal statements with an online/target network pair and no negatives.
//! Stage two ([`conrt`], [`identifier`]) trains a supervised event-pair
//! classifier while a contrastive term pulls representations of causal
//! pairs toward the frozen teacher's encoding of external statements.

pub mod conrt;
pub mod corpus;
pub mod encoders;
mod error;
pub mod harness;
pub mod identifier;
pub mod numeric;
pub mod selfrl;

pub use error::{Error, Result};
