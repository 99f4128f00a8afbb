//! Hierarchical memory tree for web agents.
//!
//! Successful trajectories are abstracted into a three-level tree (task,
//! subgoal, step). At inference time the tree is searched top-down, the
//! current stage is selected by a planner with a confidence-gated fallback,
//! and stored step descriptors are grounded onto the live page.

pub mod backend;
pub mod embedding;
pub mod inference;
pub mod memory;
pub mod persist;
pub mod pipeline;
pub mod resolver;
pub mod retrieval;
