//! Reaction-template GFlowNet engine: molecules are grown from building
//! blocks by applying reaction templates, and forward/backward policies are
//! trained with trajectory balance.

pub mod chemgraph;
pub mod eval;
pub mod mdp;
pub mod numerics;
pub mod policy;
pub mod rewards;
pub mod templates;
pub mod training;
