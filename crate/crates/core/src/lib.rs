//! Retrieval-augmented multilingual knowledge editing.
//!
//! Edited facts live in a [`kb::KnowledgeBase`]. For each query the
//! [`retrieval`] module picks at most one related fact, [`prompting`] turns
//! it (plus optional demonstrations) into a prompt for a model behind the
//! [`gateway`] contract, and [`eval`] scores the outcome with the
//! reliability, generality, locality and portability metrics.

pub mod eval;
pub mod gateway;
pub mod kb;
pub mod pipeline;
pub mod prompting;
pub mod retrieval;
pub mod synthetic;
