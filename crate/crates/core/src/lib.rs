//! Online accompaniment generation with a learned reward ensemble and
//! actor-critic training.
//!
//! A human part arrives one sixteenth-note token at a time; the policy
//! answers each step with a machine token. Policies are warm-started from a
//! maximum-likelihood model and refined with generalized advantage estimation
//! against an ensemble of masked-context reward models plus a repetition
//! penalty.

pub mod checkpoint;
pub mod corpus;
pub mod generator;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod optim;
pub mod pretrain;
pub mod reward;
pub mod rl;
pub mod score;
pub mod tensor;
